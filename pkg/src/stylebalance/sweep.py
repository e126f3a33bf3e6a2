"""p1/p2 proportion sweep: one augmented training run per grid cell."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .backbones import TapSpec
from .balancer import augmentation_budget, generate_augmented_set
from .classifier import TrainConfig, build_model, train_classifier
from .dataset import LabeledDataset, MajorityMinorityPartition, class_histogram
from .errors import ValidationError
from .metrics import ClassMetrics, Metrics, evaluate
from .styletransfer import StyleTransferEngine

logger = logging.getLogger(__name__)

GRID_COLUMNS = ("p1", "p2", "accuracy", "precision", "recall", "f1", "seed", "cell_dir")
CELL_MARKER = "metrics.json"


def parse_grid(text: Union[str, Sequence[float]]) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or ``a,b,c`` into an ascending list."""
    if not isinstance(text, str):
        values = [float(v) for v in text]
    elif ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid {text!r}: expected start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValidationError(f"grid {text!r}: step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ValidationError(f"grid {text!r} is empty")
        values = [round(start + i * step, 10) for i in range(n)]
    else:
        try:
            values = [float(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise ValidationError(f"grid {text!r}: {exc}") from None
    if not values:
        raise ValidationError("grid is empty")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValidationError(f"grid values must lie in [0, 1]: {values}")
    return sorted(set(values))


def cell_seed(base_seed: int, p1: float, p2: float) -> int:
    """base_seed XOR a 31-bit digest of the cell coordinates."""
    digest = hashlib.sha256(f"{p1:.6f},{p2:.6f}".encode()).digest()
    return int(base_seed) ^ (int.from_bytes(digest[:4], "big") & 0x7FFFFFFF)


def cell_name(p1: float, p2: float) -> str:
    return f"p1_{p1:.2f}_p2_{p2:.2f}"


@dataclass
class SweepSetup:
    """Everything a cell needs apart from its (p1, p2) and seed."""

    dataset: LabeledDataset
    engine: StyleTransferEngine
    partition: MajorityMinorityPartition
    train_config: TrainConfig
    backbone: str = "toy"
    tap_spec: Optional[TapSpec] = None
    weights_path: Optional[Path] = None
    alpha: float = 1.0
    eval_split: str = "test"


@dataclass
class CellResult:
    p1: float
    p2: float
    seed: int
    test: Metrics
    dev: Optional[Metrics]
    augmented: int
    train_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out["dev"] = None if self.dev is None else self.dev.as_dict()
        out["test"] = self.test.as_dict()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CellResult":
        def metrics(d):
            if d is None:
                return None
            per_class = {k: ClassMetrics(**v) for k, v in d["per_class"].items()}
            return Metrics(**{**d, "per_class": per_class})

        return cls(**{**data, "test": metrics(data["test"]), "dev": metrics(data.get("dev"))})


@dataclass
class SweepGrid:
    p1_values: list[float]
    p2_values: list[float]
    base_seed: int
    cells: dict[tuple[float, float], CellResult] = field(default_factory=dict)
    control: Optional[CellResult] = None
    failures: dict[tuple[float, float], str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failures and len(self.cells) == len(self.p1_values) * len(self.p2_values)

    def best(self, metric: str = "macro_f1") -> CellResult:
        if not self.cells:
            raise ValidationError("sweep has no completed cells")
        return max(self.cells.values(), key=lambda c: (getattr(c.test, metric), -c.p1, -c.p2))


def run_cell(setup: SweepSetup, p1: float, p2: float, seed: int) -> CellResult:
    """Budget, augment, train and evaluate one cell; p1 = p2 = 0 is the control run."""
    start = time.perf_counter()
    ds = setup.dataset
    budget = augmentation_budget(class_histogram(ds), setup.partition, p1, p2)
    augmented = generate_augmented_set(ds, setup.engine, budget, alpha=setup.alpha, seed=seed)
    config = replace(setup.train_config, seed=seed)
    toy_state = setup.engine.encoder.state_dict() if setup.backbone == "toy" else None
    model = build_model(setup.backbone, ds.classes, tap_spec=setup.tap_spec, dropout_p=config.dropout_p,
                        image_size=config.image_size, head_width=config.head_width,
                        weights_path=setup.weights_path, toy_state=toy_state, seed=seed)
    dev = ds.split("dev")
    model, history = train_classifier(model, ds.split("train") + augmented, dev, config)
    return CellResult(
        p1=p1, p2=p2, seed=seed,
        test=evaluate(model, ds.split(setup.eval_split), config.batch_size),
        dev=evaluate(model, dev, config.batch_size) if dev else None,
        augmented=len(augmented),
        train_loss=history.train_loss,
        seconds=time.perf_counter() - start,
    )


def _run_and_store(setup: SweepSetup, p1: float, p2: float, seed: int, cell_dir: Optional[Path]) -> CellResult:
    result = run_cell(setup, p1, p2, seed)
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        with open(cell_dir / "history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss"])
            writer.writerows(enumerate(result.train_loss, start=1))
        # the marker goes last so a half-written cell is never treated as done
        tmp = cell_dir / (CELL_MARKER + ".tmp")
        tmp.write_text(json.dumps(result.to_json(), indent=2))
        tmp.replace(cell_dir / CELL_MARKER)
    return result


def _load_cell(cell_dir: Optional[Path]) -> Optional[CellResult]:
    if cell_dir is None or not (cell_dir / CELL_MARKER).exists():
        return None
    return CellResult.from_json(json.loads((cell_dir / CELL_MARKER).read_text()))


def sweep(
    setup: SweepSetup,
    p1_values: Sequence[float],
    p2_values: Sequence[float],
    base_seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    include_control: bool = True,
    workers: int = 1,
) -> SweepGrid:
    """Run every (p1, p2) cell, plus a p1 = p2 = 0 control when it is not on the grid.

    With ``out_dir`` each cell writes ``<out_dir>/cells/<cell>/metrics.json`` on
    success and cells that already have one are loaded instead of rerun. A
    failing cell is logged and recorded in ``failures``; the others continue.
    """
    p1_values, p2_values = parse_grid(p1_values), parse_grid(p2_values)
    root = Path(out_dir) if out_dir is not None else None
    grid = SweepGrid(p1_values, p2_values, base_seed)

    jobs = [(p1, p2) for p1 in p1_values for p2 in p2_values]
    if include_control and (0.0, 0.0) not in jobs:
        jobs.append((0.0, 0.0))
    on_grid = {(p1, p2) for p1 in p1_values for p2 in p2_values}

    def place(key, result):
        if key in on_grid:
            grid.cells[key] = result
        if key == (0.0, 0.0):
            grid.control = result

    pending = []
    for key in jobs:
        cell_dir = root / "cells" / cell_name(*key) if root else None
        done = _load_cell(cell_dir)
        if done is not None:
            logger.info("cell %s already complete, skipping", cell_name(*key))
            place(key, done)
        else:
            pending.append((key, cell_dir))

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(workers, mp_context=mp.get_context("spawn")) as pool:
            futures = [(key, pool.submit(_run_and_store, setup, *key, cell_seed(base_seed, *key), d))
                       for key, d in pending]
            for key, fut in futures:
                try:
                    place(key, fut.result())
                except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the sweep
                    _record_failure(grid, key, exc, root)
    else:
        for key, cell_dir in pending:
            try:
                place(key, _run_and_store(setup, *key, cell_seed(base_seed, *key), cell_dir))
            except Exception as exc:  # noqa: BLE001
                _record_failure(grid, key, exc, root)

    if root is not None:
        write_grid(grid, root)
    return grid


def _record_failure(grid: SweepGrid, key, exc: Exception, root: Optional[Path]) -> None:
    message = f"{type(exc).__name__}: {exc}"
    logger.error("cell %s failed: %s", cell_name(*key), message)
    grid.failures[key] = message
    if root is not None:
        cell_dir = root / "cells" / cell_name(*key)
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "error.txt").write_text(message + "\n")


def _fmt(p: float) -> str:
    text = f"{p:g}"
    return text if "." in text or "e" in text else f"{p:.1f}"


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def format_matrix(grid: SweepGrid) -> str:
    """Rows p1, columns p2, each cell ``acc/prec/rec`` in percent; failed cells show ``-``."""
    header = ["p1/p2"] + [_fmt(p2) for p2 in grid.p2_values]
    rows = [header]
    for p1 in grid.p1_values:
        row = [_fmt(p1)]
        for p2 in grid.p2_values:
            cell = grid.cells.get((p1, p2))
            row.append("-" if cell is None else
                       f"{_pct(cell.test.accuracy)}/{_pct(cell.test.macro_precision)}/{_pct(cell.test.macro_recall)}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [" | ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    if grid.control is not None:
        c = grid.control.test
        lines.append("")
        lines.append(f"control (p1=0, p2=0): {_pct(c.accuracy)}/{_pct(c.macro_precision)}/{_pct(c.macro_recall)}")
    return "\n".join(lines) + "\n"


def write_grid(grid: SweepGrid, out_dir: Union[str, Path]) -> tuple[Path, Path]:
    """Write ``sweep_grid.csv`` (grid cells, then the control row if off-grid) and ``sweep_grid.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [grid.cells[k] for k in sorted(grid.cells)]
    if grid.control is not None and (0.0, 0.0) not in grid.cells:
        rows.append(grid.control)
    csv_path = out_dir / "sweep_grid.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_COLUMNS)
        for c in rows:
            writer.writerow([f"{c.p1:g}", f"{c.p2:g}", f"{c.test.accuracy:.6f}", f"{c.test.macro_precision:.6f}",
                             f"{c.test.macro_recall:.6f}", f"{c.test.macro_f1:.6f}", c.seed,
                             f"cells/{cell_name(c.p1, c.p2)}"])
    txt_path = out_dir / "sweep_grid.txt"
    txt_path.write_text(format_matrix(grid))
    return csv_path, txt_path


def read_grid_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
