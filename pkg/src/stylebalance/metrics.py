"""Evaluation metrics, confidence ranking and attention-map export."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import matplotlib
import numpy as np
import torch

from .classifier import AttentionClassifier, focal_loss, predict
from .dataset import load_image, save_image
from .errors import ValidationError

RAMP = matplotlib.colormaps["jet"]  # dark blue (low) -> dark red (high)


def _ramp_lut() -> np.ndarray:
    # jet's 256 entries collapse to fewer 8-bit colours; keep the distinct ones
    # in order so written PNGs still decode to a unique rank
    q = np.round(RAMP(np.arange(RAMP.N))[:, :3] * 255.0)
    keep = np.ones(len(q), dtype=bool)
    keep[1:] = np.any(q[1:] != q[:-1], axis=1)
    return (q[keep] / 255.0).astype(np.float32)


RAMP_LUT = _ramp_lut()
RAMP_STEPS = len(RAMP_LUT)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, ClassMetrics] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_from_predictions(y_true: Sequence[str], y_pred: Sequence[str], classes: Sequence[str]) -> Metrics:
    """Accuracy plus per-class and macro precision/recall/F1.

    A zero denominator gives 0 for that value and sets the matching
    ``*_undefined`` flag. Macro values average over every class in ``classes``.
    """
    if len(y_true) != len(y_pred) or not y_true:
        raise ValidationError("need equally long, non-empty truth and prediction lists")
    index = {c: i for i, c in enumerate(classes)}
    unknown = (set(y_true) | set(y_pred)) - set(index)
    if unknown:
        raise ValidationError(f"unknown labels: {sorted(unknown)}")
    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[index[t], index[p]] += 1

    per_class = {}
    for i, cls in enumerate(classes):
        tp = confusion[i, i]
        predicted = confusion[:, i].sum()
        actual = confusion[i, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls] = ClassMetrics(float(precision), float(recall), float(f1), int(actual),
                                      precision_undefined=not predicted, recall_undefined=not actual)

    def macro(attr):
        return float(np.mean([getattr(m, attr) for m in per_class.values()]))

    return Metrics(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        macro_precision=macro("precision"),
        macro_recall=macro("recall"),
        macro_f1=macro("f1"),
        per_class=per_class,
        confusion=confusion.tolist(),
    )


def evaluate(model: AttentionClassifier, items: Sequence, batch_size: int = 64) -> Metrics:
    if not items:
        raise ValidationError("evaluation set is empty")
    logits, _ = predict(model, items, batch_size)
    preds = [model.classes[i] for i in logits.argmax(1).tolist()]
    return metrics_from_predictions([it.label for it in items], preds, model.classes)


# ---------------------------------------------------------------------------
# Confidence ranking


@dataclass
class RankedItem:
    item_id: str
    label: str
    loss: float


def rank_by_loss(ids: Sequence[str], labels: Sequence[str], losses: Sequence[float], k: int):
    """Lowest-loss ``k`` and highest-loss ``k`` entries.

    Both lists come from one total order on (loss, item id), read from either
    end, so they never overlap when 2k <= N.
    """
    if k > len(ids):
        raise ValidationError(f"k={k} exceeds the number of items ({len(ids)})")
    rows = sorted((RankedItem(i, l, float(v)) for i, l, v in zip(ids, labels, losses)),
                  key=lambda r: (r.loss, r.item_id))
    return rows[:k], rows[::-1][:k]


def rank_confidence(model: AttentionClassifier, items: Sequence, k: int, alpha: float = 2.0,
                    gamma: float = 2.0, batch_size: int = 64):
    """Most and least confident items by per-sample focal loss."""
    logits, _ = predict(model, items, batch_size)
    index = {c: i for i, c in enumerate(model.classes)}
    target = torch.tensor([index[it.label] for it in items])
    losses = focal_loss(logits, target, alpha, gamma, reduction="none").tolist()
    return rank_by_loss([it.item_id for it in items], [it.label for it in items], losses, k)


# ---------------------------------------------------------------------------
# Attention maps


def render_attention(weights: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Colour an attention grid with the blue-to-red ramp at ``size`` (H, W).

    Weights are min-max scaled per map and upsampled by nearest neighbour, so
    colour order follows weight order exactly; a constant map renders as one colour.
    """
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    scaled = (w - lo) / (hi - lo) if hi > lo else np.zeros_like(w)
    idx = np.minimum((scaled * RAMP_STEPS).astype(np.int64), RAMP_STEPS - 1)
    h, wd = size
    rows = (np.arange(h) * w.shape[0]) // h
    cols = (np.arange(wd) * w.shape[1]) // wd
    return RAMP_LUT[idx[np.ix_(rows, cols)]]


def ramp_index(rgb: np.ndarray) -> np.ndarray:
    """Invert :func:`render_attention` colours (uint8 or float) back to ramp indices."""
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.max() > 1.0:
        rgb = rgb / 255.0
    d = ((rgb[..., None, :] - RAMP_LUT) ** 2).sum(-1)
    return d.argmin(-1)


def export_attention_maps(model: AttentionClassifier, items: Sequence, out_dir: Union[str, Path],
                          batch_size: int = 64) -> list[Path]:
    """Write ``<item>_input.png`` and ``<item>_tap{1..4}.png`` per item."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create attention output directory {out_dir}: {exc}") from exc
    _, maps = predict(model, items, batch_size)
    written = []
    for n, item in enumerate(items):
        image = load_image(item.image_ref)
        size = image.shape[:2]
        name = item.item_id.replace("/", "_")
        targets = [(out_dir / f"{name}_input.png", image)]
        for t, amap in enumerate(maps, start=1):
            targets.append((out_dir / f"{name}_tap{t}.png", render_attention(amap[n].numpy(), size)))
        for path, arr in targets:
            try:
                save_image(arr, path)
            except OSError as exc:
                raise OSError(f"failed to write {path}: {exc}") from exc
            written.append(path)
    return written
