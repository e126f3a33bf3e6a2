"""Encoders and frozen classifier backbones.

Style transfer uses a 4-stage encoder whose stage outputs are the style taps
(relu1_1/relu2_1/relu3_1/relu4_1 for VGG-19). The classifier wraps a
torchvision model (or the toy encoder) with ``create_feature_extractor`` to
expose four tap maps plus the final feature map.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torchvision
from torchvision.models.feature_extraction import create_feature_extractor, get_graph_node_names

from .errors import ValidationError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TOY_CHANNELS = (8, 16, 32, 64)


class Normalize(nn.Module):
    def __init__(self, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv(cin, cout):
    return [nn.ReflectionPad2d(1), nn.Conv2d(cin, cout, 3), nn.ReLU()]


class StageEncoder(nn.Sequential):
    """Four stages; each stage output is a tap. Total stride 8."""

    def __init__(self, stages: "OrderedDict[str, nn.Module]", channels: Sequence[int], backbone_id: str):
        super().__init__(stages)
        self.channels = tuple(channels)
        self.backbone_id = backbone_id
        self.stride = 2 ** (len(channels) - 1)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for stage in self:
            x = stage(x)
            out.append(x)
        return out


def toy_encoder(channels: Sequence[int] = TOY_CHANNELS) -> StageEncoder:
    """VGG-like encoder: relu(conv) | [conv, relu, pool, conv, relu] x 3."""
    c = list(channels)
    stages = OrderedDict(stage1=nn.Sequential(*_conv(3, c[0])))
    for i in range(1, len(c)):
        stages[f"stage{i + 1}"] = nn.Sequential(
            *_conv(c[i - 1], c[i - 1]), nn.MaxPool2d(2), *_conv(c[i - 1], c[i])
        )
    return StageEncoder(stages, c, "toy")


def vgg19_encoder(weights_path: Optional[Path] = None, warn: bool = True) -> StageEncoder:
    """torchvision VGG-19 sliced at relu1_1, relu2_1, relu3_1, relu4_1."""
    vgg = torchvision.models.vgg19(weights=None)
    if weights_path is not None:
        vgg.load_state_dict(torch.load(weights_path, map_location="cpu"))
    elif warn:
        logger.warning("vgg19 encoder has no weights path; using random initialisation")
    f = vgg.features
    stages = OrderedDict(
        stage1=nn.Sequential(Normalize(), *f[0:2]),
        stage2=nn.Sequential(*f[2:7]),
        stage3=nn.Sequential(*f[7:12]),
        stage4=nn.Sequential(*f[12:21]),
    )
    return StageEncoder(stages, (64, 128, 256, 512), "vgg19")


def build_encoder(backbone_id: str, weights_path: Optional[Path] = None, channels=None,
                  warn: bool = True) -> StageEncoder:
    if backbone_id == "toy":
        return toy_encoder(channels or TOY_CHANNELS)
    if backbone_id == "vgg19":
        return vgg19_encoder(weights_path, warn)
    raise ValidationError(f"unknown style encoder {backbone_id!r} (choose toy or vgg19)")


def mirror_decoder(channels: Sequence[int]) -> nn.Sequential:
    """Decoder mirroring a stage encoder: nearest upsampling, reflection padding."""
    c = list(channels)
    layers: list[nn.Module] = []
    for i in range(len(c) - 1, 0, -1):
        layers += _conv(c[i], c[i - 1])
        layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
        layers += _conv(c[i - 1], c[i - 1])
    layers += [nn.ReflectionPad2d(1), nn.Conv2d(c[0], 3, 3)]
    return nn.Sequential(*layers)


@torch.no_grad()
def normalize_activations(encoder: StageEncoder, images: torch.Tensor) -> None:
    """Rescale conv filters so every ReLU channel has mean activation 1 on ``images``.

    Each conv's output channel c is divided by its mean activation m_c and the
    next conv's input channel c is multiplied by m_c. ReLU, max pooling and
    reflection padding commute with positive per-channel scaling, so only the
    per-channel scale of each activation changes. Dead channels are left alone.
    """
    convs = [m for m in encoder.modules() if isinstance(m, nn.Conv2d)]
    means = {}

    def hook(module, inputs, output):
        means[module] = output.clamp_min(0).mean(dim=(0, 2, 3))

    for i, conv in enumerate(convs):
        handle = conv.register_forward_hook(hook)
        encoder(images)
        handle.remove()
        m = means[conv]
        scale = torch.where(m > 1e-8, m, torch.ones_like(m))
        conv.weight.div_(scale.view(-1, 1, 1, 1))
        conv.bias.div_(scale)
        if i + 1 < len(convs):
            convs[i + 1].weight.mul_(scale.view(1, -1, 1, 1))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# Classifier backbones

@dataclass(frozen=True)
class TapSpec:
    """Four tap node names ordered by depth plus the node feeding global pooling."""

    tap_points: tuple[str, str, str, str]
    global_point: str

    def __post_init__(self):
        if len(self.tap_points) != 4:
            raise ValidationError(f"exactly 4 taps required, got {len(self.tap_points)}")
        if len(set(self.tap_points)) != 4:
            raise ValidationError("tap points must be distinct")


DEFAULT_TAPS = {
    "toy": TapSpec(("stage1", "stage2", "stage3", "stage4"), "stage4"),
    "resnet34": TapSpec(("layer1", "layer2", "layer3", "layer4"), "layer4"),
    "resnet50": TapSpec(("layer1", "layer2", "layer3", "layer4"), "layer4"),
    "vgg16": TapSpec(("features.1", "features.8", "features.15", "features.22"), "features.30"),
    "vgg19": TapSpec(("features.1", "features.8", "features.17", "features.26"), "features.36"),
}
BACKBONES = tuple(DEFAULT_TAPS)


class Backbone(nn.Module):
    """Frozen feature extractor returning ``(taps, final_map)``."""

    def __init__(self, model: nn.Module, backbone_id: str, tap_spec: TapSpec, normalize: bool):
        super().__init__()
        _, eval_nodes = get_graph_node_names(model)

        def depth(node):
            # a module name resolves to the last graph node inside it
            hits = [i for i, n in enumerate(eval_nodes) if n == node or n.startswith(node + ".")]
            if not hits:
                raise ValidationError(f"tap {node!r} not found in backbone {backbone_id!r}")
            return hits[-1]

        depths = [depth(n) for n in tap_spec.tap_points]
        if any(a >= b for a, b in zip(depths, depths[1:])) or depth(tap_spec.global_point) < depths[-1]:
            raise ValidationError("taps must be strictly ordered by depth and precede the global point")

        return_nodes = {node: node for node in (*tap_spec.tap_points, tap_spec.global_point)}
        self.extractor = create_feature_extractor(model.eval(), return_nodes=return_nodes)
        self.normalize = Normalize() if normalize else nn.Identity()
        self.backbone_id = backbone_id
        self.tap_spec = tap_spec
        freeze(self)
        with torch.no_grad():
            taps, final = self(torch.zeros(1, 3, 64, 64))
        self.tap_channels = tuple(t.shape[1] for t in taps)
        self.global_dim = final.shape[1]

    def train(self, mode: bool = True):
        # frozen: always run in eval mode so batch-norm statistics never move
        return super().train(False)

    def forward(self, x):
        feats = self.extractor(self.normalize(x))
        return [feats[n] for n in self.tap_spec.tap_points], feats[self.tap_spec.global_point]


def build_backbone(
    backbone_id: str,
    tap_spec: Optional[TapSpec] = None,
    weights_path: Optional[Path] = None,
    toy_state: Optional[dict] = None,
    toy_channels: Sequence[int] = TOY_CHANNELS,
) -> Backbone:
    """Build a frozen backbone. ``toy`` takes its weights from ``toy_state``."""
    if backbone_id not in DEFAULT_TAPS:
        raise ValidationError(f"unknown backbone {backbone_id!r} (choose from {BACKBONES})")
    tap_spec = tap_spec or DEFAULT_TAPS[backbone_id]
    if backbone_id == "toy":
        model = toy_encoder(toy_channels)
        if toy_state is not None:
            model.load_state_dict(toy_state)
        return Backbone(model, backbone_id, tap_spec, normalize=False)

    model = getattr(torchvision.models, backbone_id)(weights=None)
    if weights_path is not None:
        model.load_state_dict(torch.load(weights_path, map_location="cpu"))
    else:
        logger.warning("backbone %s has no weights path; using random initialisation", backbone_id)
    return Backbone(model, backbone_id, tap_spec, normalize=True)
