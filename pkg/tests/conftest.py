import os

import numpy as np
import pytest
import torch

from stylebalance.dataset import make_toy_dataset
from stylebalance.styletransfer import new_engine, pretrain_encoder, train_decoder

TINY_RECIPE = {
    "A": {"count": 12, "shape": "circle", "palette": "warm"},
    "B": {"count": 10, "shape": "square", "palette": "warm"},
    "C": {"count": 4, "shape": "triangle", "palette": "cool"},
    "D": {"count": 3, "shape": "cross", "palette": "cool"},
}


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(min(4, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def tiny_ds():
    return make_toy_dataset(TINY_RECIPE, image_size=32, seed=3, eval_per_class=3)


@pytest.fixture(scope="session")
def tiny_engine(tiny_ds):
    """A toy engine trained just long enough to be 'trained'; quality is irrelevant here."""
    engine = new_engine(seed=0, image_size=32)
    pretrain_encoder(engine, tiny_ds, iterations=10, seed=0)
    train_decoder(engine, tiny_ds, iterations=10, lr=1e-3, seed=0)
    return engine


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting: one PASS/FAIL/SKIP line per criterion ---

_CRITERIA: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.details = number, title, []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        detail = "; ".join(self.details)
        if kind is None:
            status = "PASS"
        elif issubclass(kind, pytest.skip.Exception):
            status, detail = "SKIP", str(exc)
        else:
            status = "FAIL"
            detail = f"{detail}; {kind.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".lstrip("; ")
        line = f"criterion {self.number} [{status}] {self.title}" + (f" ({detail})" if detail else "")
        _CRITERIA[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
