"""Labeled image collections, class statistics and the synthetic toy dataset."""

from __future__ import annotations

import csv
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .errors import DatasetFormatError, IngestionError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

ImageRef = Union[Path, np.ndarray]


@dataclass(frozen=True, eq=False)
class LabeledItem:
    item_id: str
    image_ref: ImageRef
    label: str
    split: str
    size: tuple[int, int]  # (height, width) of the decoded image


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[LabeledItem, ...]
    classes: tuple[str, ...]
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def split(self, name: str) -> list[LabeledItem]:
        if name not in SPLITS:
            raise DatasetFormatError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [item for item in self.items if item.split == name]

    def by_class(self, split: str = "train") -> dict[str, list[LabeledItem]]:
        groups: dict[str, list[LabeledItem]] = {c: [] for c in self.classes}
        for item in self.split(split):
            groups[item.label].append(item)
        return groups


@dataclass(frozen=True)
class ClassHistogram:
    counts: Mapping[str, int]

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(sorted(self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class MajorityMinorityPartition:
    majority: frozenset[str]
    minority: frozenset[str]

    def side(self, cls: str) -> str:
        if cls in self.majority:
            return "majority"
        if cls in self.minority:
            return "minority"
        raise ValidationError(f"class {cls!r} is not covered by the partition")


def load_image(ref: ImageRef) -> np.ndarray:
    """Decode an image reference to a float32 H x W x 3 array in [0, 1]."""
    if isinstance(ref, np.ndarray):
        return ref
    with Image.open(ref) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def _finalize(items: list[LabeledItem], classes: Optional[Iterable[str]]) -> LabeledDataset:
    if not items:
        raise IngestionError("empty dataset")
    labels = {item.label for item in items}
    class_set = set(classes) if classes is not None else set(labels)
    unknown = labels - class_set
    if unknown:
        raise DatasetFormatError(f"labels outside the declared class set: {sorted(unknown)}")
    train_labels = {item.label for item in items if item.split == "train"}
    warnings = []
    for cls in sorted(class_set - train_labels):
        msg = f"class {cls!r} has no train items"
        logger.warning(msg)
        warnings.append(msg)
    return LabeledDataset(tuple(items), tuple(sorted(class_set)), tuple(warnings))


def load_dataset(
    root: Union[str, Path],
    labels: Union[str, Path],
    label_column: str = "status",
    classes: Optional[Iterable[str]] = None,
    workers: int = 8,
) -> LabeledDataset:
    """Load a Kaokore-style collection: an image directory plus a labels CSV.

    The CSV needs an ``image`` column, the requested label column and a ``set``
    column holding one of train/dev/test. Rows keep file order.
    """
    root = Path(root)
    labels = Path(labels)
    if not labels.is_file():
        raise IngestionError(f"labels file not found: {labels}")
    with open(labels, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("image", label_column, "set"):
            if col not in header:
                raise DatasetFormatError(f"{labels}: missing column {col!r} (have {header})")
        rows = list(reader)
    if not rows:
        raise IngestionError("empty dataset")

    paths = []
    for lineno, row in enumerate(rows, start=2):
        split = row["set"].strip()
        if split not in SPLITS:
            raise DatasetFormatError(f"{labels}:{lineno}: unknown split tag {split!r}")
        path = root / row["image"].strip()
        if not path.is_file():
            raise IngestionError(f"missing image file: {path}")
        paths.append(path)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sizes = list(pool.map(_image_size, paths))

    items = [
        LabeledItem(
            item_id=Path(row["image"].strip()).stem,
            image_ref=path,
            label=row[label_column].strip(),
            split=row["set"].strip(),
            size=size,
        )
        for row, path, size in zip(rows, paths, sizes)
    ]
    return _finalize(items, classes)


def load_image_folder(root: Union[str, Path], workers: int = 8) -> LabeledDataset:
    """Load a ``<root>/<split>/<class>/<image>`` directory tree."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    entries = []
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if split_dir.name not in SPLITS:
            raise DatasetFormatError(f"unknown split directory {split_dir}")
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            for path in sorted(class_dir.iterdir()):
                if path.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append((path, class_dir.name, split_dir.name))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sizes = list(pool.map(_image_size, [e[0] for e in entries]))
    items = [
        LabeledItem(f"{split}/{label}/{path.stem}", path, label, split, size)
        for (path, label, split), size in zip(entries, sizes)
    ]
    return _finalize(items, None)


def class_histogram(ds: LabeledDataset) -> ClassHistogram:
    counts = {cls: 0 for cls in ds.classes}
    for item in ds.items:
        if item.split == "train":
            counts[item.label] += 1
    return ClassHistogram(counts)


def partition_majority_minority(
    hist: ClassHistogram,
    override: Optional[Mapping[str, Iterable[str]]] = None,
) -> MajorityMinorityPartition:
    """Split classes into majority (count >= median) and minority.

    ``override`` must be a mapping with ``majority`` and ``minority`` lists that
    together cover every class exactly once; it is returned as given.
    """
    classes = set(hist.counts)
    if len(classes) < 2:
        raise ValidationError("partition needs at least 2 classes")
    if override is not None:
        majority = frozenset(override.get("majority", ()))
        minority = frozenset(override.get("minority", ()))
        if majority & minority:
            raise ValidationError(f"override lists overlap: {sorted(majority & minority)}")
        if majority | minority != classes:
            missing = sorted(classes - (majority | minority))
            extra = sorted((majority | minority) - classes)
            raise ValidationError(f"override must cover the class set (missing {missing}, unknown {extra})")
        return MajorityMinorityPartition(majority, minority)

    median = statistics.median(hist.counts.values())
    majority = frozenset(c for c, n in hist.counts.items() if n >= median)
    minority = frozenset(classes - majority)
    if not minority:
        raise ValidationError("minority empty; supply override")
    return MajorityMinorityPartition(majority, minority)


# ---------------------------------------------------------------------------
# Synthetic toy dataset

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")

PALETTES: dict[str, tuple[tuple[int, int, int], ...]] = {
    "warm": ((214, 69, 65), (240, 160, 60), (250, 220, 120), (150, 40, 50), (200, 110, 80)),
    "cool": ((40, 90, 180), (60, 170, 200), (120, 200, 170), (30, 50, 110), (150, 140, 220)),
    "earth": ((110, 80, 50), (160, 130, 80), (90, 120, 60), (200, 180, 140), (60, 60, 40)),
    "vivid": ((230, 30, 140), (30, 200, 60), (250, 240, 30), (20, 20, 230), (250, 120, 0)),
    "mono": ((20, 20, 20), (90, 90, 90), (160, 160, 160), (230, 230, 230), (200, 200, 200)),
}
TEXTURES = ("flat", "stripes", "checker", "dots", "noise", "gradient")
MAX_ROTATION = 0.3  # radians; shapes stay near upright so edge orientation is a usable cue
OUTLINE_VALUE = 0.05


@dataclass(frozen=True)
class ToyClassRecipe:
    count: int
    shape: str
    palette: str = "any"
    dev: Optional[int] = None
    test: Optional[int] = None


def _parse_recipes(spec: Mapping[str, object]) -> dict[str, ToyClassRecipe]:
    recipes = {}
    for i, name in enumerate(sorted(spec)):
        entry = spec[name]
        default_shape = SHAPES[i % len(SHAPES)]
        if isinstance(entry, ToyClassRecipe):
            recipe = entry
        elif isinstance(entry, int):
            recipe = ToyClassRecipe(entry, default_shape)
        elif isinstance(entry, (tuple, list)):
            recipe = ToyClassRecipe(int(entry[0]), *(entry[1:] or (default_shape,)))
        elif isinstance(entry, Mapping):
            recipe = ToyClassRecipe(
                count=int(entry["count"]),
                shape=entry.get("shape", default_shape),
                palette=entry.get("palette", "any"),
                dev=entry.get("dev"),
                test=entry.get("test"),
            )
        else:
            raise ValidationError(f"toy class {name!r}: unsupported recipe {entry!r}")
        if recipe.count < 1:
            raise ValidationError(f"toy class {name!r}: count must be >= 1")
        if recipe.shape not in SHAPES:
            raise ValidationError(f"toy class {name!r}: unknown shape {recipe.shape!r} (choose from {SHAPES})")
        if recipe.palette != "any" and recipe.palette not in PALETTES:
            raise ValidationError(f"toy class {name!r}: unknown palette {recipe.palette!r}")
        recipes[name] = recipe
    return recipes


def _texture(rng: np.random.Generator, size: int, colors: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    kind = TEXTURES[rng.integers(len(TEXTURES))]
    if kind == "flat":
        t = np.zeros((size, size), np.float32)
    elif kind == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 10)
        t = (np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0).astype(np.float32)
    elif kind == "checker":
        k = rng.integers(3, 9)
        t = ((np.floor(xx * k) + np.floor(yy * k)) % 2).astype(np.float32)
    elif kind == "dots":
        k = rng.uniform(4, 10)
        t = (((xx * k) % 1 - 0.5) ** 2 + ((yy * k) % 1 - 0.5) ** 2 < 0.08).astype(np.float32)
    elif kind == "noise":
        coarse = rng.random((6, 6)).astype(np.float32)
        t = np.asarray(Image.fromarray(coarse).resize((size, size), Image.BILINEAR))
    else:
        theta = rng.uniform(0, 2 * np.pi)
        t = np.clip(0.5 + (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta), 0, 1)
    return colors[0] * (1 - t[..., None]) + colors[1] * t[..., None]


def _shape_mask(rng: np.random.Generator, size: int, shape: str) -> Image.Image:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    r = rng.uniform(0.22, 0.34) * size
    cx, cy = rng.uniform(0.4, 0.6, size=2) * size
    rot = rng.uniform(-MAX_ROTATION, MAX_ROTATION)

    def poly(angles, radii):
        return [(cx + rr * np.cos(a + rot), cy + rr * np.sin(a + rot)) for a, rr in zip(angles, radii)]

    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ri = 0.55 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    elif shape == "square":
        draw.polygon(poly(np.pi / 4 + np.arange(4) * np.pi / 2, [r * 1.1] * 4), fill=255)
    elif shape == "diamond":
        draw.polygon(poly(np.arange(4) * np.pi / 2, [r * 1.2, r * 0.7, r * 1.2, r * 0.7]), fill=255)
    elif shape == "triangle":
        draw.polygon(poly(-np.pi / 2 + np.arange(3) * 2 * np.pi / 3, [r * 1.2] * 3), fill=255)
    elif shape == "cross":
        w = 0.38 * r
        for a in (0.0, np.pi / 2):
            c, s = np.cos(rot + a), np.sin(rot + a)
            pts = [(-r, -w), (r, -w), (r, w), (-r, w)]
            draw.polygon([(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts], fill=255)
    return canvas


def _toy_image(rng: np.random.Generator, size: int, recipe: ToyClassRecipe) -> np.ndarray:
    palette_name = recipe.palette
    if palette_name == "any":
        palette_name = sorted(PALETTES)[rng.integers(len(PALETTES))]
    palette = np.asarray(PALETTES[palette_name], np.float32) / 255.0
    picks = rng.choice(len(palette), size=4, replace=False)
    jitter = rng.normal(0, 0.04, size=(4, 3)).astype(np.float32)
    colors = np.clip(palette[picks] + jitter, 0, 1)
    background = _texture(rng, size, colors[:2])
    foreground = _texture(rng, size, colors[2:])
    canvas = _shape_mask(rng, size, recipe.shape)
    mask = np.asarray(canvas, dtype=np.float32)[..., None] / 255.0
    outline = np.asarray(canvas.filter(ImageFilter.MaxFilter(5)), dtype=np.float32)[..., None] / 255.0
    img = foreground * mask + background * (1 - mask)
    # dark contour around the silhouette, like ink lines in paintings
    img = np.where((outline > 0.5) & (mask < 0.5), OUTLINE_VALUE, img)
    img = img + rng.normal(0, 0.02, size=img.shape).astype(np.float32)
    return to_uint8(img).astype(np.float32) / 255.0


def make_toy_dataset(
    spec: Mapping[str, object],
    image_size: int = 64,
    seed: int = 0,
    eval_per_class: int = 25,
) -> LabeledDataset:
    """Generate an imbalanced synthetic dataset where shape is the class cue.

    ``spec`` maps class name to a train count, a ``(count, shape[, palette])``
    tuple, a mapping with ``count``/``shape``/``palette`` (and optional
    ``dev``/``test`` counts), or a :class:`ToyClassRecipe`. Textures are always
    random; colours come from the class's palette, or from any palette when it
    is ``"any"``. Each image has its own seed stream, so pixels depend only on
    (seed, class, split, index).
    """
    if image_size < 32:
        raise ValidationError("image_size must be >= 32 (the encoder downsamples 3 times)")
    recipes = _parse_recipes(spec)
    if len(recipes) < 2:
        raise ValidationError("toy dataset needs at least 2 classes")

    items = []
    for ci, (name, recipe) in enumerate(recipes.items()):
        split_counts = {
            "train": recipe.count,
            "dev": eval_per_class if recipe.dev is None else recipe.dev,
            "test": eval_per_class if recipe.test is None else recipe.test,
        }
        for si, split in enumerate(SPLITS):
            for i in range(split_counts[split]):
                rng = np.random.default_rng([seed, ci, si, i])
                img = _toy_image(rng, image_size, recipe)
                items.append(LabeledItem(f"{name}_{split}_{i:05d}", img, name, split, (image_size, image_size)))
    return LabeledDataset(tuple(items), tuple(recipes))


def write_dataset(ds: LabeledDataset, out_dir: Union[str, Path], label_column: str = "status") -> Path:
    """Materialize a dataset in Kaokore layout (``images/`` plus ``labels.csv``)."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    labels_path = out_dir / "labels.csv"
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", label_column, "set"])
        for item in ds.items:
            name = f"{item.item_id}.png"
            save_image(load_image(item.image_ref), image_dir / name)
            writer.writerow([f"images/{name}", item.label, item.split])
    return labels_path


def items_for_ids(ds: LabeledDataset, ids: Sequence[str]) -> list[LabeledItem]:
    index = {item.item_id: item for item in ds.items}
    return [index[i] for i in ids]
