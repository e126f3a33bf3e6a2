"""AdaIN style transfer: feature taps, channel statistics, losses, decoder training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .backbones import StageEncoder, build_encoder, freeze, mirror_decoder, normalize_activations
from .dataset import LabeledDataset
from .errors import NumericalAbort, ShapeError, StageDependencyError, ValidationError
from .utils import ImagePool, parameter_checksum, to_image, to_tensor

logger = logging.getLogger(__name__)

EPS = 1e-5
DEFAULT_STYLE_WEIGHT = 10.0
CHECKPOINT_FORMAT = "stylebalance.decoder"
CHECKPOINT_VERSION = 1
TAP_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class ChannelStats:
    mean: torch.Tensor
    std: torch.Tensor
    eps: float = EPS


def channel_stats(fmap, eps: float = EPS) -> ChannelStats:
    """Per-channel spatial mean and population std, the latter as sqrt(var + eps).

    Works on ``C x H x W`` or ``B x C x H x W``; statistics have the leading shape.
    """
    fmap = _as_tensor(fmap)
    if fmap.dim() < 3 or fmap.shape[-1] * fmap.shape[-2] < 1:
        raise ShapeError(f"feature map needs shape (..., C, H, W) with H*W >= 1, got {tuple(fmap.shape)}")
    flat = fmap.flatten(-2)
    mean = flat.mean(-1)
    var = flat.var(-1, unbiased=False)
    return ChannelStats(mean, torch.sqrt(var + eps), eps)


def adain(c_feat, s_feat, eps: float = EPS) -> torch.Tensor:
    """Re-standardize content features to the style features' channel statistics."""
    c_feat, s_feat = _as_tensor(c_feat), _as_tensor(s_feat)
    if c_feat.shape[-3] != s_feat.shape[-3]:
        raise ShapeError(f"channel mismatch: content {c_feat.shape[-3]} vs style {s_feat.shape[-3]}")
    cs, ss = channel_stats(c_feat, eps), channel_stats(s_feat, eps)
    normalized = (c_feat - cs.mean[..., None, None]) / cs.std[..., None, None]
    return normalized * ss.std[..., None, None] + ss.mean[..., None, None]


@dataclass
class FeaturePyramid:
    layers: list[torch.Tensor]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a feature pyramid needs at least one layer")
        sizes = [tuple(t.shape[-2:]) for t in self.layers]
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 > h0 or w1 > w0:
                raise ShapeError(f"spatial sizes must be non-increasing with depth: {sizes}")

    @property
    def content_feature(self) -> torch.Tensor:
        return self.layers[-1]

    def __len__(self) -> int:
        return len(self.layers)


def content_loss(stylized_feat, target) -> torch.Tensor:
    stylized_feat, target = _as_tensor(stylized_feat), _as_tensor(target)
    if stylized_feat.shape != target.shape:
        raise ShapeError(f"content loss shape mismatch: {tuple(stylized_feat.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(stylized_feat, target)


def style_loss(stylized: FeaturePyramid, style: FeaturePyramid, eps: float = EPS) -> torch.Tensor:
    """Sum over layers of MSE between channel means plus MSE between channel stds."""
    if len(stylized) != len(style):
        raise ShapeError(f"layer count mismatch: {len(stylized)} vs {len(style)}")
    total = 0.0
    for a, b in zip(stylized.layers, style.layers):
        if a.shape[-3] != b.shape[-3]:
            raise ShapeError(f"channel mismatch in style layer: {a.shape[-3]} vs {b.shape[-3]}")
        sa, sb = channel_stats(a, eps), channel_stats(b, eps)
        total = total + F.mse_loss(sa.mean, sb.mean) + F.mse_loss(sa.std, sb.std)
    return total


# ---------------------------------------------------------------------------
# Engine

@dataclass
class StyleTransferEngine:
    encoder: StageEncoder
    decoder: nn.Module
    alpha: float = 1.0
    eps: float = EPS
    style_weight: float = DEFAULT_STYLE_WEIGHT
    image_size: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("decoder_iterations"))


def new_engine(
    backbone: str = "toy",
    weights_path: Optional[Path] = None,
    seed: int = 0,
    style_weight: float = DEFAULT_STYLE_WEIGHT,
    image_size: Optional[int] = None,
) -> StyleTransferEngine:
    torch.manual_seed(seed)
    encoder = freeze(build_encoder(backbone, weights_path))
    decoder = mirror_decoder(encoder.channels)
    return StyleTransferEngine(encoder, decoder, style_weight=style_weight, image_size=image_size,
                               meta={"backbone": backbone, "seed": seed})


def _check_size(x: torch.Tensor, stride: int) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"image size {h}x{w} must be a multiple of {stride}")


def _encode(encoder: StageEncoder, x: torch.Tensor) -> FeaturePyramid:
    _check_size(x, encoder.stride)
    return FeaturePyramid(encoder.taps(x))


def encode_features(engine: StyleTransferEngine, image) -> FeaturePyramid:
    """Encoder taps for an H x W x 3 array or a (B x) 3 x H x W tensor."""
    x = to_tensor(image).to(next(engine.encoder.parameters()).dtype)
    with torch.no_grad():
        return _encode(engine.encoder, x)


# ---------------------------------------------------------------------------
# Training

def pretrain_encoder(
    engine: StyleTransferEngine,
    train_ds: LabeledDataset,
    iterations: int = 400,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    normalize: bool = True,
    normalize_samples: int = 256,
) -> list[float]:
    """Fit the (toy) encoder as an autoencoder, then freeze it again.

    Stand-in for pretrained weights at desk scale. The decoder used here is
    thrown away; the engine's own decoder is untouched. With ``normalize`` the
    filters are rescaled afterwards so each channel averages 1 on training
    images, which keeps downstream feature magnitudes well conditioned.
    """
    items = train_ds.split("train")
    if not items:
        raise ValidationError("train split is empty")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    encoder = engine.encoder
    scratch = mirror_decoder(encoder.channels)
    for p in encoder.parameters():
        p.requires_grad_(True)
    encoder.train()
    opt = torch.optim.Adam([*encoder.parameters(), *scratch.parameters()], lr=lr)
    pool = ImagePool(items, engine.image_size)
    history = []
    for it in range(iterations):
        x = pool.get(torch.randint(len(pool), (batch_size,), generator=gen))
        loss = F.mse_loss(scratch(encoder(x)), x)
        if not torch.isfinite(loss):
            raise NumericalAbort(f"encoder pretraining: non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    freeze(encoder)
    if normalize:
        sample = torch.randperm(len(pool), generator=gen)[:normalize_samples]
        normalize_activations(encoder, pool.get(sample))
    engine.meta["encoder_pretrain_iterations"] = iterations
    engine.meta["encoder_normalized"] = normalize
    return history


@dataclass
class LossHistory:
    total: list[float] = field(default_factory=list)
    content: list[float] = field(default_factory=list)
    style: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)


def train_decoder(
    engine: StyleTransferEngine,
    train_ds: LabeledDataset,
    iterations: int,
    style_weight: Optional[float] = None,
    lr: float = 1e-4,
    lr_decay: float = 5e-5,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[nn.Module, LossHistory]:
    """Train the decoder on uniformly sampled (content, style) train pairs.

    Pairs ignore class labels. Only decoder parameters are optimized; the
    encoder checksum is verified unchanged at the end.
    """
    if iterations <= 0:
        raise ValidationError("iterations must be positive")
    items = train_ds.split("train")
    if not items:
        raise ValidationError("train split is empty")
    if style_weight is None:
        style_weight = engine.style_weight
    engine.style_weight = style_weight

    encoder, decoder = engine.encoder, engine.decoder
    before = parameter_checksum(encoder)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    decoder.train()
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: 1.0 / (1.0 + lr_decay * i))
    pool = ImagePool(items, engine.image_size)
    history = LossHistory()

    for it in range(iterations):
        content = pool.get(torch.randint(len(pool), (batch_size,), generator=gen))
        style = pool.get(torch.randint(len(pool), (batch_size,), generator=gen))
        with torch.no_grad():
            c_feat = _encode(encoder, content).content_feature
            s_pyr = _encode(encoder, style)
            t = adain(c_feat, s_pyr.content_feature, engine.eps)
        g_pyr = _encode(encoder, decoder(t))
        lc = content_loss(g_pyr.content_feature, t)
        ls = style_loss(g_pyr, s_pyr, engine.eps)
        loss = lc + style_weight * ls
        if not torch.isfinite(loss):
            raise NumericalAbort(
                f"decoder training: non-finite loss at iteration {it} "
                f"(content={lc.item():.4g}, style={ls.item():.4g})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.total.append(loss.item())
        history.content.append(lc.item())
        history.style.append(ls.item())

    decoder.eval()
    if parameter_checksum(encoder) != before:
        raise RuntimeError("encoder parameters changed during decoder training")
    engine.meta.update(decoder_iterations=iterations, decoder_seed=seed, decoder_lr=lr)
    return decoder, history


# ---------------------------------------------------------------------------
# Inference

def stylize_tensor(engine: StyleTransferEngine, content: torch.Tensor, style: torch.Tensor,
                   alpha: float = 1.0) -> torch.Tensor:
    """Batched stylization of B x 3 x H x W tensors; output clamped to [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    with torch.no_grad():
        c = _encode(engine.encoder, content).content_feature
        s = _encode(engine.encoder, style).content_feature
        t = alpha * adain(c, s, engine.eps) + (1 - alpha) * c
        return engine.decoder.eval()(t).clamp(0.0, 1.0)


def stylize(engine: StyleTransferEngine, content_img, style_img, alpha: float = 1.0) -> np.ndarray:
    """Stylize one content image with one style image; returns H x W x 3 in [0, 1]."""
    if not engine.trained:
        raise StageDependencyError("stylize needs a trained decoder (run train_decoder or load a checkpoint)")
    out = stylize_tensor(engine, to_tensor(content_img), to_tensor(style_img), alpha)
    return to_image(out)


# ---------------------------------------------------------------------------
# Checkpoints

def save_engine(engine: StyleTransferEngine, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "backbone": engine.encoder.backbone_id,
            "encoder_channels": list(engine.encoder.channels),
            "taps": list(TAP_NAMES),
            "encoder_state": engine.encoder.state_dict(),
            "decoder_state": engine.decoder.state_dict(),
            "eps": engine.eps,
            "style_weight": engine.style_weight,
            "alpha": engine.alpha,
            "image_size": engine.image_size,
            "meta": engine.meta,
        },
        path,
    )
    return path


def load_engine(path: Union[str, Path]) -> StyleTransferEngine:
    path = Path(path)
    if not path.is_file():
        raise StageDependencyError(f"decoder checkpoint not found: {path} (run train-style first)")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a decoder checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: checkpoint version {ckpt['version']} is newer than supported")
    # weights come from the checkpoint, not a weights file
    encoder = build_encoder(ckpt["backbone"], channels=ckpt["encoder_channels"], warn=False)
    encoder.load_state_dict(ckpt["encoder_state"])
    freeze(encoder)
    decoder = mirror_decoder(encoder.channels)
    decoder.load_state_dict(ckpt["decoder_state"])
    decoder.eval()
    return StyleTransferEngine(encoder, decoder, alpha=ckpt["alpha"], eps=ckpt["eps"],
                               style_weight=ckpt["style_weight"], image_size=ckpt["image_size"],
                               meta=ckpt["meta"])
