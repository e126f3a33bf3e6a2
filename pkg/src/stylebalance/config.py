"""Run configuration: a YAML key tree whose leaves the CLI flags override."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .backbones import BACKBONES
from .classifier import TrainConfig
from .errors import ValidationError

DATA_SOURCES = ("csv", "folder", "toy")


def default_toy_classes() -> dict:
    # two majority and two minority classes; palettes are shared pairwise so
    # shape is needed to separate classes within a pair
    return {
        "A": {"count": 400, "shape": "circle", "palette": "warm"},
        "B": {"count": 400, "shape": "square", "palette": "warm"},
        "C": {"count": 80, "shape": "triangle", "palette": "cool"},
        "D": {"count": 40, "shape": "cross", "palette": "cool"},
    }


@dataclass
class DataConfig:
    source: str = "csv"
    root: Optional[str] = None
    labels: str = "labels.csv"
    label_column: str = "status"
    workers: int = 8


@dataclass
class ToyConfig:
    image_size: int = 64
    eval_per_class: int = 50
    seed: Optional[int] = None
    classes: dict = field(default_factory=default_toy_classes)


@dataclass
class StyleConfig:
    backbone: str = "toy"
    weights: Optional[str] = None
    iterations: int = 20000
    style_weight: float = 10.0
    lr: float = 1e-4
    lr_decay: float = 5e-5
    batch_size: int = 8
    image_size: int = 256
    pretrain_iterations: int = 400
    pretrain_lr: float = 1e-3
    decoder: Optional[str] = None


@dataclass
class BudgetConfig:
    p1: float = 0.3
    p2: float = 0.2
    alpha: float = 1.0
    majority: Optional[list] = None


@dataclass
class ClassifierConfig:
    backbone: str = "toy"
    weights: Optional[str] = None
    aug_manifest: Optional[str] = "auto"
    batch_size: int = 64
    learning_rate: float = 1e-4
    epochs: int = 20
    dropout_p: float = 0.23
    focal_alpha: float = 2.0
    focal_gamma: float = 2.0
    weight_decay: float = 1e-4
    workers: int = 8
    image_size: int = 224
    head_width: int = 512
    model: Optional[str] = None

    def train_config(self, seed: int) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(seed=seed, **{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class SweepConfig:
    p1: str = "0.1:1.0:0.1"
    p2: str = "0.1:1.0:0.1"
    workers: int = 1
    control: bool = True


@dataclass
class ReportConfig:
    split: str = "test"
    topk: int = 10
    attention: bool = False
    attention_items: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.data.source not in DATA_SOURCES:
            raise ValidationError(f"data.source must be one of {DATA_SOURCES}, got {self.data.source!r}")
        if self.style.backbone not in ("toy", "vgg19"):
            raise ValidationError(f"style.backbone must be 'toy' or 'vgg19', got {self.style.backbone!r}")
        if self.classifier.backbone not in BACKBONES:
            raise ValidationError(f"classifier.backbone must be one of {BACKBONES}")
        for name in ("p1", "p2", "alpha"):
            v = getattr(self.budget, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"budget.{name} must lie in [0, 1], got {v}")
        if self.report.split not in ("train", "dev", "test"):
            raise ValidationError(f"report.split must be train, dev or test, got {self.report.split!r}")
        self.classifier.train_config(self.seed)  # field range checks
        if check_paths:
            if self.data.source != "toy":
                if not self.data.root:
                    raise ValidationError(f"data.root is required when data.source is {self.data.source!r}")
                if not Path(self.data.root).is_dir():
                    raise ValidationError(f"data.root {self.data.root} is not a directory")
            for key in ("style.weights", "classifier.weights"):
                value = get_key(self, key)
                if value and not Path(value).is_file():
                    raise ValidationError(f"{key}: {value} does not exist")
        return self


def valid_keys(node: Any = None, prefix: str = "") -> list[str]:
    """Dotted paths of every leaf key, e.g. ``classifier.epochs``."""
    node = RunConfig() if node is None else node
    keys = []
    for f in fields(node):
        value = getattr(node, f.name)
        if is_dataclass(value):
            keys.extend(valid_keys(value, f"{prefix}{f.name}."))
        else:
            keys.append(f"{prefix}{f.name}")
    return keys


def _resolve(cfg: RunConfig, key: str):
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        child = getattr(node, part, None) if is_dataclass(node) else None
        if not is_dataclass(child):
            break
        node = child
    else:
        if is_dataclass(node) and parts[-1] in {f.name for f in fields(node)} \
                and not is_dataclass(getattr(node, parts[-1])):
            return node, parts[-1]
    raise ValidationError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


def get_key(cfg: RunConfig, key: str):
    node, name = _resolve(cfg, key)
    return getattr(node, name)


def _coerce(key: str, current, value):
    if value is None or current is None or isinstance(current, (dict, list)):
        return value
    kind = type(current)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError("not an integer")
        return kind(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def set_key(cfg: RunConfig, key: str, value) -> None:
    node, name = _resolve(cfg, key)
    setattr(node, name, _coerce(key, getattr(node, name), value))


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        # toy.classes is a free-form map; every other dict is a section
        if isinstance(v, dict) and key != "toy.classes":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy with dotted (or nested) overrides applied; unknown keys raise."""
    cfg = copy.deepcopy(cfg)
    for key, value in _flatten(overrides).items():
        set_key(cfg, key, value)
    return cfg


def load_config(path: Union[str, Path, None] = None, overrides: Optional[dict] = None,
                base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(tree, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        cfg = apply_overrides(cfg, tree)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# Small settings under which the whole pipeline runs on a laptop CPU in minutes.
TOY_PROFILE = {
    "data.source": "toy",
    "style.iterations": 600,
    "style.lr": 1e-3,
    "style.image_size": 64,
    "style.pretrain_iterations": 600,
    "style.pretrain_lr": 2e-3,
    "classifier.backbone": "toy",
    "classifier.batch_size": 16,
    "classifier.learning_rate": 1e-3,
    "classifier.epochs": 10,
    "classifier.workers": 0,
    "classifier.image_size": 64,
    "sweep.p1": "0.3,0.6,0.9",
    "sweep.p2": "0.3,0.6,0.9",
}
