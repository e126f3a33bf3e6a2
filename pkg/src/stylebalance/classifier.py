"""Spatial-attention classifier over a frozen backbone, trained with focal loss."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import __version__
from .backbones import TOY_CHANNELS, Backbone, TapSpec, build_backbone
from .dataset import load_image
from .errors import NumericalAbort, ShapeError, StageDependencyError, ValidationError
from .utils import parameter_checksum, resize, to_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stylebalance.classifier"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    epochs: int = 20
    dropout_p: float = 0.23
    focal_alpha: float = 2.0
    focal_gamma: float = 2.0
    weight_decay: float = 1e-4
    workers: int = 8
    seed: int = 0
    image_size: int = 224
    head_width: int = 512

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "epochs", "focal_alpha", "workers", "image_size", "head_width"):
            if getattr(self, name) <= 0 and name != "workers":
                raise ValidationError(f"{name} must be positive")
        if self.focal_gamma < 0 or self.weight_decay < 0 or self.workers < 0:
            raise ValidationError("focal_gamma, weight_decay and workers must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")


@dataclass
class AttentionOutput:
    descriptor: torch.Tensor  # B x d
    attention_map: torch.Tensor  # B x H x W, sums to 1 over H x W


def spatial_attention(local: torch.Tensor, global_vec: torch.Tensor) -> AttentionOutput:
    """Softmax over positions of <local_i, global>; descriptor is the weighted sum of locals.

    ``local`` is B x d x H x W (already projected to the global dimension),
    ``global_vec`` is B x d.
    """
    if local.dim() != 4 or global_vec.dim() != 2 or local.shape[1] != global_vec.shape[1]:
        raise ShapeError(f"attention dimension mismatch: local {tuple(local.shape)} vs global {tuple(global_vec.shape)}")
    b, d, h, w = local.shape
    flat = local.flatten(2)
    scores = torch.einsum("bdn,bd->bn", flat, global_vec)
    weights = torch.softmax(scores, dim=1)
    descriptor = torch.einsum("bn,bdn->bd", weights, flat)
    return AttentionOutput(descriptor, weights.view(b, h, w))


class AttentionClassifier(nn.Module):
    def __init__(self, backbone: Backbone, classes: Sequence[str], dropout_p: float = 0.23,
                 head_width: int = 512, image_size: int = 224):
        super().__init__()
        self.backbone = backbone
        self.classes = tuple(classes)
        self.image_size = image_size
        d = backbone.global_dim
        self.projections = nn.ModuleList(nn.Conv2d(c, d, kernel_size=1) for c in backbone.tap_channels)
        self.head = nn.Sequential(
            nn.Linear(d * (len(backbone.tap_channels) + 1), head_width),
            nn.ReLU(),
            nn.Dropout(dropout_p),
            nn.Linear(head_width, len(self.classes)),
        )

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def features(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"expected B x 3 x {self.image_size} x {self.image_size}, got {tuple(x.shape)}")
        with torch.no_grad():
            return self.backbone(x)

    def head_forward(self, taps: Sequence[torch.Tensor], final: torch.Tensor):
        """Attention + dense head on precomputed backbone outputs.

        Equivalent to ``spatial_attention(proj(tap), g)`` per tap but never
        materializes the projected map: scores use W^T g (the bias term is
        constant over positions), and the descriptor projects the attended mean.
        """
        g = final.mean(dim=(2, 3))
        descriptors, maps = [], []
        for proj, tap in zip(self.projections, taps):
            weight = proj.weight.flatten(1)  # d x c
            b, c, h, w = tap.shape
            flat = tap.flatten(2)
            scores = torch.einsum("bcn,bc->bn", flat, g @ weight) + (g @ proj.bias).unsqueeze(1)
            attn = torch.softmax(scores, dim=1)
            descriptors.append(torch.einsum("bn,bcn->bc", attn, flat) @ weight.t() + proj.bias)
            maps.append(attn.view(b, h, w))
        logits = self.head(torch.cat(descriptors + [g], dim=1))
        return logits, maps

    def reference_forward(self, x: torch.Tensor):
        """Unfactorized path: project every position, then attend."""
        taps, final = self.features(x)
        g = final.mean(dim=(2, 3))
        outs = [spatial_attention(proj(t), g) for proj, t in zip(self.projections, taps)]
        logits = self.head(torch.cat([o.descriptor for o in outs] + [g], dim=1))
        return logits, [o.attention_map for o in outs]

    def forward(self, x: torch.Tensor):
        taps, final = self.features(x)
        return self.head_forward(taps, final)


def build_model(
    backbone_id: str,
    classes: Sequence[str],
    tap_spec: Optional[TapSpec] = None,
    dropout_p: float = 0.23,
    image_size: int = 224,
    head_width: int = 512,
    weights_path: Optional[Path] = None,
    toy_state: Optional[dict] = None,
    seed: int = 0,
) -> AttentionClassifier:
    if len(classes) < 2:
        raise ValidationError("need at least 2 classes")
    backbone = build_backbone(backbone_id, tap_spec, weights_path=weights_path, toy_state=toy_state)
    torch.manual_seed(seed)
    return AttentionClassifier(backbone, sorted(classes), dropout_p, head_width, image_size)


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, gamma: float = 2.0,
               reduction: str = "mean") -> torch.Tensor:
    """-alpha * (1 - p_t)^gamma * log(p_t), with p_t the softmax probability of the target.

    ``target`` is either one-hot (B x K) or class indices (B,).
    """
    if not torch.isfinite(logits).all():
        raise NumericalAbort("focal loss received non-finite logits")
    if target.dim() == logits.dim():
        if target.shape != logits.shape:
            raise ShapeError(f"one-hot target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
        log_pt = (F.log_softmax(logits, dim=-1) * target).sum(-1)
    else:
        log_pt = F.log_softmax(logits, dim=-1).gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    loss = -alpha * (1 - log_pt.exp()) ** gamma * log_pt
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


# ---------------------------------------------------------------------------
# Data


class ItemDataset(Dataset):
    def __init__(self, items: Sequence, classes: Sequence[str], size: int):
        index = {c: i for i, c in enumerate(classes)}
        unknown = {it.label for it in items} - set(index)
        if unknown:
            raise ValidationError(f"labels outside the model's class map: {sorted(unknown)}")
        self.items = list(items)
        self.targets = [index[it.label] for it in self.items]
        self.size = size
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        t = self._cache.get(i)
        if t is None:
            ref = self.items[i].image_ref
            t = resize(to_tensor(load_image(ref)), self.size)[0]
            if isinstance(ref, np.ndarray):
                self._cache[i] = t
        return t, self.targets[i]


def _loader(items, classes, size, batch_size, workers) -> DataLoader:
    ds = ItemDataset(items, classes, size)
    on_disk = any(not isinstance(it.image_ref, np.ndarray) for it in items)
    # a private generator keeps loader seeding off the global RNG that drives dropout
    return DataLoader(ds, batch_size=batch_size, num_workers=workers if on_disk else 0,
                      generator=torch.Generator().manual_seed(0))


def predict(model: AttentionClassifier, items: Sequence, batch_size: int = 64, workers: int = 0):
    """Eval-mode logits (N x K) and per-tap attention maps for ``items``."""
    model.eval()
    logits, maps = [], [[] for _ in range(4)]
    with torch.no_grad():
        for x, _ in _loader(items, model.classes, model.image_size, batch_size, workers):
            out, amaps = model(x)
            logits.append(out)
            for acc, m in zip(maps, amaps):
                acc.append(m)
    return torch.cat(logits), [torch.cat(m) for m in maps]


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: Optional[float] = None
    dev_macro_f1: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.epochs]


def _cache_features(model: AttentionClassifier, items: Sequence, batch_size: int):
    taps_acc, final_acc = [[] for _ in range(4)], []
    spec = model.backbone.tap_spec
    shared = spec.global_point in spec.tap_points
    for x, _ in _loader(items, model.classes, model.image_size, batch_size, 0):
        taps, final = model.features(x)
        for acc, t in zip(taps_acc, taps):
            acc.append(t)
        if not shared:
            final_acc.append(final)
    taps = [torch.cat(a) for a in taps_acc]
    final = taps[spec.tap_points.index(spec.global_point)] if shared else torch.cat(final_acc)
    return taps, final


def _cache_bytes(model: AttentionClassifier, n: int) -> int:
    with torch.no_grad():
        taps, final = model.features(torch.zeros(1, 3, model.image_size, model.image_size))
    return 4 * n * (sum(t.numel() for t in taps) + final.numel())


def train_classifier(
    model: AttentionClassifier,
    train_items: Sequence,
    dev_items: Sequence,
    config: TrainConfig,
    feature_cache_mb: int = 1024,
) -> tuple[AttentionClassifier, TrainHistory]:
    """Adam on head/attention parameters with focal loss and L2 weight decay.

    The parameters from the epoch with the best dev accuracy are restored at
    the end (the last epoch when there is no dev set). Frozen backbone outputs
    of in-memory training sets are computed once and reused across epochs when
    they fit in ``feature_cache_mb``.
    """
    from .metrics import evaluate

    if not train_items:
        raise ValidationError("training set is empty")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    backbone_sum = parameter_checksum(model.backbone)
    dataset = ItemDataset(train_items, model.classes, model.image_size)
    targets = torch.tensor(dataset.targets)
    in_memory = all(isinstance(it.image_ref, np.ndarray) for it in train_items)
    cache = None
    if in_memory and _cache_bytes(model, len(train_items)) <= feature_cache_mb * 2**20:
        cache = _cache_features(model, train_items, config.batch_size)

    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate,
                           weight_decay=config.weight_decay)
    history = TrainHistory()
    best_acc, best_state = -1.0, None

    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(len(dataset), generator=gen)
        if cache is None:
            batches = DataLoader(dataset, batch_size=config.batch_size, sampler=order.tolist(),
                                 num_workers=0 if in_memory else config.workers,
                                 generator=torch.Generator().manual_seed(config.seed))
        else:
            batches = (order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size))
        total, count = 0.0, 0
        for batch_idx, batch in enumerate(batches):
            if cache is None:
                x, y = batch
                logits, _ = model(x)
            else:
                y = targets[batch]
                logits, _ = model.head_forward([t[batch] for t in cache[0]], cache[1][batch])
            if not torch.isfinite(logits).all():
                raise NumericalAbort(f"non-finite logits at epoch {epoch}, batch {batch_idx}")
            loss = focal_loss(logits, y, config.focal_alpha, config.focal_gamma)
            if not torch.isfinite(loss):
                raise NumericalAbort(f"non-finite classifier loss at epoch {epoch}, batch {batch_idx}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            count += len(y)
        record = EpochRecord(epoch, total / count)
        if dev_items:
            m = evaluate(model, dev_items, batch_size=config.batch_size)
            record.dev_accuracy, record.dev_macro_f1 = m.accuracy, m.macro_f1
            if m.accuracy > best_acc:
                best_acc, history.best_epoch = m.accuracy, epoch
                best_state = copy.deepcopy(model.state_dict())
        history.epochs.append(record)
        logger.info("epoch %d loss %.4f dev_acc %s", epoch, record.train_loss, record.dev_accuracy)

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = config.epochs - 1
    model.eval()
    if parameter_checksum(model.backbone) != backbone_sum:
        raise RuntimeError("backbone parameters changed during classifier training")
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: AttentionClassifier, path: Union[str, Path], config: TrainConfig,
               weights_path: Optional[Path] = None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bb = model.backbone
    trainable = {k: v for k, v in model.state_dict().items() if not k.startswith("backbone.")}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "backbone": bb.backbone_id,
            "tap_spec": {"tap_points": list(bb.tap_spec.tap_points), "global_point": bb.tap_spec.global_point},
            # the toy backbone has no external weight file, so it travels with the model
            "backbone_state": bb.extractor.state_dict() if bb.backbone_id == "toy" else None,
            "toy_channels": list(bb.tap_channels) if bb.backbone_id == "toy" else None,
            "backbone_weights_path": str(weights_path) if weights_path else None,
            "head_state": trainable,
            "classes": list(model.classes),
            "image_size": model.image_size,
            "train_config": asdict(config),
            "meta": meta or {},
        },
        path,
    )
    return path


def load_model(path: Union[str, Path]) -> tuple[AttentionClassifier, dict]:
    path = Path(path)
    if not path.is_file():
        raise StageDependencyError(f"model checkpoint not found: {path} (run train-clf first)")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a classifier checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: checkpoint version {ckpt['version']} is newer than supported")
    cfg = ckpt["train_config"]
    tap_spec = TapSpec(tuple(ckpt["tap_spec"]["tap_points"]), ckpt["tap_spec"]["global_point"])
    weights = Path(ckpt["backbone_weights_path"]) if ckpt["backbone_weights_path"] else None
    backbone = build_backbone(ckpt["backbone"], tap_spec, weights_path=weights,
                              toy_channels=ckpt["toy_channels"] or TOY_CHANNELS)
    if ckpt["backbone_state"] is not None:
        backbone.extractor.load_state_dict(ckpt["backbone_state"])
    model = AttentionClassifier(backbone, ckpt["classes"], cfg["dropout_p"], cfg["head_width"], ckpt["image_size"])
    missing, unexpected = model.load_state_dict(ckpt["head_state"], strict=False)
    if unexpected or any(not k.startswith("backbone.") for k in missing):
        raise ValidationError(f"{path}: head parameters do not match the architecture")
    return model.eval(), ckpt

