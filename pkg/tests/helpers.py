"""Shared test utilities: central finite differences and random scan inputs."""
from __future__ import annotations

import torch


def central_difference(fn, tensors, h: float = 1e-3) -> list[torch.Tensor]:
    """d fn() / d t for every tensor in ``tensors`` by (f(t + h) - f(t - h)) / 2h, in place."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                saved = flat[i].item()
                flat[i] = saved + h
                plus = float(fn())
                flat[i] = saved - h
                minus = float(fn())
                flat[i] = saved
                gflat[i] = (plus - minus) / (2 * h)
            grads.append(g)
    return grads


def analytic_gradient(fn, tensors) -> list[torch.Tensor]:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def relative_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    """||g_a - g_n|| / max(||g_a||, ||g_n||) over all tensors jointly.

    Norm-wise rather than element-wise: entries whose true gradient is ~0
    would otherwise turn FD round-off into arbitrarily large ratios.
    """
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale


def gradient_error(fn, tensors, h: float = 1e-3) -> float:
    return relative_error(analytic_gradient(fn, tensors), central_difference(fn, tensors, h))


def random_scan_inputs(gen: torch.Generator, batch: int, length: int, channels: int, state: int,
                       dtype=torch.float64, groups: int | None = None):
    """(u, delta, A, B, C) with delta > 0 and A < 0; B/C grouped when ``groups`` is given."""
    shape_bc = (batch, length, state) if groups is None else (batch, length, groups, state)
    u = torch.randn(batch, length, channels, generator=gen, dtype=dtype)
    delta = torch.nn.functional.softplus(torch.randn(batch, length, channels, generator=gen, dtype=dtype) - 1)
    A = -torch.exp(torch.rand(channels, state, generator=gen, dtype=dtype) * 2 - 1)
    B = torch.randn(*shape_bc, generator=gen, dtype=dtype)
    C = torch.randn(*shape_bc, generator=gen, dtype=dtype)
    return u, delta, A, B, C
