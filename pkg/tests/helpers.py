"""Central finite-difference oracle shared by the gradient tests."""

import torch

H = 1e-4


def numeric_grad(fn, x: torch.Tensor, h: float = H) -> torch.Tensor:
    """d fn / d x by central differences, one coordinate at a time (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def scalarize(out: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Fixed random projection that turns a tensor-valued function into a scalar one."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()
