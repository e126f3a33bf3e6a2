"""Per-class augmentation budgets and class-preserving stylized samples."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .dataset import ClassHistogram, LabeledDataset, MajorityMinorityPartition, save_image
from .errors import DatasetFormatError, ValidationError
from .styletransfer import StyleTransferEngine, stylize_tensor
from .utils import ImagePool, to_image

MANIFEST_COLUMNS = ("image", "label", "content_src", "style_src", "alpha", "seed")


@dataclass(frozen=True)
class AugmentationBudget:
    p1: float
    p2: float
    per_class: Mapping[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_class.values())


@dataclass(frozen=True)
class Provenance:
    content_id: str
    style_id: str
    alpha: float
    seed: int


@dataclass(frozen=True, eq=False)
class AugmentedItem:
    item_id: str
    image_ref: Union[Path, np.ndarray]
    label: str
    provenance: Provenance
    split: str = "train"


def _check_fraction(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ValidationError(f"{name} must lie in [0, 1], got {p}")


def augmentation_budget(
    hist: ClassHistogram, partition: MajorityMinorityPartition, p1: float, p2: float
) -> AugmentationBudget:
    """floor(p1 * count) extra samples per majority class, floor(p2 * count) per minority class."""
    _check_fraction("p1", p1)
    _check_fraction("p2", p2)
    per_class = {}
    for cls in sorted(hist.counts):
        p = p1 if partition.side(cls) == "majority" else p2
        # exact arithmetic on the decimal value, so 0.7 * 1000 is 700 rather than 699.99...
        per_class[cls] = math.floor(Fraction(str(float(p))) * hist.counts[cls])
    return AugmentationBudget(p1, p2, per_class)


def sample_pairs(class_items: Sequence, n: int, seed) -> list[tuple[int, int]]:
    """``n`` (content, style) index pairs drawn uniformly with replacement."""
    if n < 0:
        raise ValidationError("n must be non-negative")
    if n == 0:
        return []
    if len(class_items) == 0:
        raise ValidationError("cannot augment empty class")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(class_items), size=(n, 2))
    return [(int(c), int(s)) for c, s in draws]


def generate_augmented_set(
    ds: LabeledDataset,
    engine: StyleTransferEngine,
    budget: AugmentationBudget,
    alpha: float = 1.0,
    seed: int = 0,
    out_dir: Optional[Path] = None,
    batch_size: int = 16,
) -> list[AugmentedItem]:
    """Stylize ``budget.per_class[k]`` same-class (content, style) train pairs per class.

    Pairs for class ``k`` come from a stream seeded by ``(seed, index of k)``,
    so a class's samples do not depend on the other classes' budgets. With
    ``out_dir`` the images are written to ``out_dir/aug/<class>/`` as PNG and
    items reference the files; otherwise the arrays stay in memory.
    """
    _check_fraction("alpha", alpha)
    groups = ds.by_class("train")
    unknown = set(budget.per_class) - set(groups)
    if unknown:
        raise ValidationError(f"budget names classes absent from the dataset: {sorted(unknown)}")

    out: list[AugmentedItem] = []
    for ci, cls in enumerate(ds.classes):
        n = budget.per_class.get(cls, 0)
        if n == 0:
            continue
        members = groups[cls]
        pairs = sample_pairs(members, n, [seed, ci])
        pool = ImagePool(members, engine.image_size)
        for start in range(0, n, batch_size):
            chunk = pairs[start:start + batch_size]
            if engine.image_size is None:
                images = [stylize_tensor(engine, pool.get([c]), pool.get([s]), alpha) for c, s in chunk]
            else:
                stylized = stylize_tensor(engine, pool.get([c for c, _ in chunk]),
                                          pool.get([s for _, s in chunk]), alpha)
                images = list(stylized.split(1))
            for k, ((c, s), img) in enumerate(zip(chunk, images)):
                item_id = f"aug_{cls}_{start + k:05d}"
                arr = to_image(img)
                ref: Union[Path, np.ndarray] = arr
                if out_dir is not None:
                    ref = Path(out_dir) / "aug" / cls / f"{item_id}.png"
                    save_image(arr, ref)
                out.append(AugmentedItem(item_id, ref, cls,
                                         Provenance(members[c].item_id, members[s].item_id, alpha, seed)))
    return out


def write_manifest(items: Sequence[AugmentedItem], path: Union[str, Path]) -> Path:
    """Write ``aug_manifest.csv``; image paths are stored relative to its directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for it in items:
            if not isinstance(it.image_ref, Path):
                raise ValidationError("manifest needs materialized items (generate with out_dir)")
            rel = Path(it.image_ref).resolve().relative_to(path.parent.resolve())
            p = it.provenance
            writer.writerow([rel.as_posix(), it.label, p.content_id, p.style_id, p.alpha, p.seed])
    return path


def read_manifest(path: Union[str, Path]) -> list[AugmentedItem]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DatasetFormatError(f"{path}: missing manifest columns {sorted(missing)}")
        rows = list(reader)
    items = []
    for row in rows:
        ref = path.parent / row["image"]
        items.append(AugmentedItem(
            Path(row["image"]).stem, ref, row["label"],
            Provenance(row["content_src"], row["style_src"], float(row["alpha"]), int(row["seed"])),
        ))
    return items
