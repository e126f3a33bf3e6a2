"""Seeding, checksums and image/tensor conversion."""

from __future__ import annotations

import hashlib
import random
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import load_image


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def array_checksum(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def file_checksum(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def to_tensor(img) -> torch.Tensor:
    """H x W x 3 array (or C x H x W / B x C x H x W tensor) -> B x 3 x H x W float tensor."""
    if isinstance(img, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)
    else:
        t = img
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def to_image(t: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W (or 3 x H x W) tensor -> H x W x 3 float32 array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


def resize(t: torch.Tensor, size: Optional[int]) -> torch.Tensor:
    if size is None or t.shape[-2:] == (size, size):
        return t
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def load_batch(items: Sequence, size: Optional[int]) -> torch.Tensor:
    """Decode items (anything with ``image_ref``) into a B x 3 x size x size tensor."""
    return torch.cat([resize(to_tensor(load_image(it.image_ref)), size) for it in items])


class ImagePool:
    """Index-addressable image source at a fixed resolution.

    In-memory items are converted once and cached; file-backed items are
    decoded on every request so large collections never sit in memory.
    """

    def __init__(self, items: Sequence, size: Optional[int]):
        self.items = list(items)
        self.size = size
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.items)

    def get(self, indices: Iterable[int]) -> torch.Tensor:
        out = []
        for i in indices:
            i = int(i)
            t = self._cache.get(i)
            if t is None:
                ref = self.items[i].image_ref
                t = resize(to_tensor(load_image(ref)), self.size)
                if isinstance(ref, np.ndarray):
                    self._cache[i] = t
            out.append(t)
        return torch.cat(out)
