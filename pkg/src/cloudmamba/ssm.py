"""Selective state-space scan (S6) and its four-direction 2-D extension (SS2D).

Tensors follow the sequence convention ``(batch, length, channels)``; 2-D maps
entering :func:`cross_scan` are channels-last ``(..., H, W, C)``.

The production scan is a pair of numba loops wrapped in a custom autograd
function with a hand-written backward recurrence.  :func:`selective_scan_reference`
is the plain step-by-step recurrence built from :func:`discretize`; it is kept
deliberately naive and serves as the oracle in the test-suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidParameterError, ShapeError

__all__ = [
    "discretize",
    "selective_scan",
    "selective_scan_reference",
    "ScanSequences",
    "cross_scan",
    "cross_merge",
    "ss2d",
    "S6",
    "SS2D",
]


def _check_params(delta: torch.Tensor, A: torch.Tensor) -> None:
    if not bool((delta > 0).all()):
        raise InvalidParameterError("delta must be strictly positive")
    if not bool((A < 0).all()):
        raise InvalidParameterError("A must be strictly negative")


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor):
    """Zero-order hold on ``A`` and the Euler rule on ``B``.

    delta: (..., L, D) positive step sizes, A: (D, N) negative, B: (..., L, N).
    Returns ``A_bar = exp(delta * A)`` and ``B_bar = delta * B``, both (..., L, D, N).
    """
    _check_params(delta, A)
    if A.shape[0] != delta.shape[-1]:
        raise ShapeError(f"A has {A.shape[0]} channels, delta has {delta.shape[-1]}")
    if B.shape[-1] != A.shape[-1] or B.shape[:-1] != delta.shape[:-1]:
        raise ShapeError(f"B shape {tuple(B.shape)} incompatible with delta {tuple(delta.shape)} / A {tuple(A.shape)}")
    A_bar = torch.exp(delta.unsqueeze(-1) * A)
    B_bar = delta.unsqueeze(-1) * B.unsqueeze(-2)
    return A_bar, B_bar


def _normalize_shapes(u, delta, A, B, C):
    """Bring inputs to (batch, L, D) / (batch, L, G, N); return (tensors, squeeze flags)."""
    unbatched = u.dim() == 2
    if unbatched:
        u, delta, B, C = u.unsqueeze(0), delta.unsqueeze(0), B.unsqueeze(0), C.unsqueeze(0)
    if u.dim() != 3:
        raise ShapeError(f"u must be (L, D) or (batch, L, D), got {tuple(u.shape)}")
    grouped = B.dim() == 4
    if not grouped:
        B, C = B.unsqueeze(2), C.unsqueeze(2)
    batch, length, channels = u.shape
    if delta.shape != u.shape:
        raise ShapeError(f"delta shape {tuple(delta.shape)} != u shape {tuple(u.shape)}")
    if A.dim() != 2 or A.shape[0] != channels:
        raise ShapeError(f"A must be ({channels}, N), got {tuple(A.shape)}")
    groups, state = B.shape[2], A.shape[1]
    expected = (batch, length, groups, state)
    if tuple(B.shape) != expected or tuple(C.shape) != expected:
        raise ShapeError(f"B/C must have shape {expected}, got {tuple(B.shape)} and {tuple(C.shape)}")
    if channels % groups:
        raise ShapeError(f"{channels} channels cannot be split into {groups} groups")
    return (u, delta, A, B, C), unbatched, grouped


def selective_scan_reference(u, delta, A, B, C):
    """Naive sequential recurrence, x_l = A_bar_l * x_{l-1} + B_bar_l * u_l, y_l = C_l . x_l.

    Same shape contract as :func:`selective_scan`.  Differentiable through
    ordinary autograd; intended for testing only.
    """
    (u, delta, A, B, C), unbatched, _ = _normalize_shapes(u, delta, A, B, C)
    batch, length, channels = u.shape
    groups, state = B.shape[2], A.shape[1]
    per_group = channels // groups
    # expand per-group B, C onto channels
    B_ch = B.repeat_interleave(per_group, dim=2)  # (batch, L, D, N)
    C_ch = C.repeat_interleave(per_group, dim=2)
    _check_params(delta, A)
    A_bar = torch.exp(delta.unsqueeze(-1) * A)
    B_bar = delta.unsqueeze(-1) * B_ch
    x = u.new_zeros(batch, channels, state)
    ys = []
    for step in range(length):
        x = A_bar[:, step] * x + B_bar[:, step] * u[:, step].unsqueeze(-1)
        ys.append((C_ch[:, step] * x).sum(-1))
    y = torch.stack(ys, dim=1)
    return y[0] if unbatched else y


CHECKPOINT_EVERY = 64
# the decay exp(delta * A) is materialized this many steps at a time (a multiple of CHECKPOINT_EVERY)
DECAY_BLOCK = 1024
# forward decay blocks are kept for the backward pass when they fit in this many bytes
DECAY_CACHE_BYTES = 256 * 2 ** 20
# reassociation lets LLVM vectorize the state-dimension reductions; NaN/Inf semantics are kept
_FASTMATH = {"reassoc", "contract", "nsz", "arcp"}


@numba.njit(cache=True, nogil=True, fastmath=_FASTMATH)
def _scan_forward(u, delta, dA, B, C, x, y, checkpoints, every):
    # One block of steps.  x (batch, D, N) carries the state in and out; dA is
    # exp(delta * A) for the block.  When checkpoints is non-empty the state
    # entering block step k * every is written to checkpoints[:, k].
    batch, length, channels = u.shape
    groups, state = B.shape[2], B.shape[3]
    per_group = channels // groups
    keep = checkpoints.size > 0
    for b in range(batch):
        for step in range(length):
            if keep and step % every == 0:
                checkpoints[b, step // every] = x[b]
            for g in range(groups):
                for d in range(g * per_group, (g + 1) * per_group):
                    du = delta[b, step, d] * u[b, step, d]
                    acc = u.dtype.type(0)
                    for n in range(state):
                        x[b, d, n] = dA[b, step, d, n] * x[b, d, n] + du * B[b, step, g, n]
                        acc += C[b, step, g, n] * x[b, d, n]
                    y[b, step, d] = acc


@numba.njit(cache=True, nogil=True, fastmath=_FASTMATH)
def _scan_backward(u, delta, A, dA, B, C, checkpoints, every, grad_y, gx, grads):
    # One block of steps, walked in reverse.  gx (batch, D, N) carries dL/dx
    # across blocks; grad_A (grads[2]) accumulates.
    grad_u, grad_delta, grad_A, grad_B, grad_C = grads
    batch, length, channels = u.shape
    groups, state = B.shape[2], B.shape[3]
    per_group = channels // groups
    zero = u.dtype.type(0)  # keeps float32 accumulators from widening to float64
    gB = np.empty(state, dtype=u.dtype)
    gC = np.empty(state, dtype=u.dtype)
    # xs[i] is the state after step start + i - 1 (xs[0] = chunk entry state)
    xs = np.empty((every + 1, channels, state), dtype=u.dtype)
    n_chunks = (length + every - 1) // every
    for b in range(batch):
        for chunk in range(n_chunks - 1, -1, -1):
            start = chunk * every
            stop = min(start + every, length)
            xs[0] = checkpoints[b, chunk]
            for step in range(start, stop):
                i = step - start
                for d in range(channels):
                    g = d // per_group
                    du = delta[b, step, d] * u[b, step, d]
                    for n in range(state):
                        xs[i + 1, d, n] = dA[b, step, d, n] * xs[i, d, n] + du * B[b, step, g, n]
            for step in range(stop - 1, start - 1, -1):
                i = step - start
                for g in range(groups):
                    gB[:] = 0.0
                    gC[:] = 0.0
                    for d in range(g * per_group, (g + 1) * per_group):
                        dt = delta[b, step, d]
                        ud = u[b, step, d]
                        gy = grad_y[b, step, d]
                        dtu = dt * ud
                        g_dt = zero
                        g_u = zero
                        for n in range(state):
                            a = dA[b, step, d, n]
                            gxn = gx[b, d, n] + gy * C[b, step, g, n]
                            gC[n] += gy * xs[i + 1, d, n]
                            ga = gxn * xs[i, d, n] * a
                            g_dt += ga * A[d, n] + gxn * B[b, step, g, n] * ud
                            grad_A[d, n] += ga * dt
                            gB[n] += gxn * dtu
                            g_u += gxn * dt * B[b, step, g, n]
                            gx[b, d, n] = gxn * a
                        grad_u[b, step, d] = g_u
                        grad_delta[b, step, d] = g_dt
                    for n in range(state):
                        grad_B[b, step, g, n] = gB[n]
                        grad_C[b, step, g, n] = gC[n]


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().contiguous().numpy()


def _decay(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """exp(delta * A) as a (batch, L, D, N) array."""
    out = delta[..., None] * A
    return np.exp(out, out=out)


def _blocks(length: int):
    return [(s, min(s + DECAY_BLOCK, length)) for s in range(0, length, DECAY_BLOCK)]


class _SelectiveScanFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, B, C):
        keep = any(ctx.needs_input_grad)
        uu, dd, aa, bb, cc = (_np(t) for t in (u, delta, A, B, C))
        batch, length, channels = uu.shape
        every = CHECKPOINT_EVERY
        n_chunks = -(-length // every) if keep else 0
        checkpoints = np.empty((batch if keep else 0, n_chunks, channels, aa.shape[1]), dtype=uu.dtype)
        x = np.zeros((batch, channels, aa.shape[1]), dtype=uu.dtype)
        y = np.empty_like(uu)
        cache = keep and dd.nbytes * aa.shape[1] <= DECAY_CACHE_BYTES
        decays = []
        for s, e in _blocks(length):
            decay = _decay(dd[:, s:e], aa)
            _scan_forward(uu[:, s:e], dd[:, s:e], decay, bb[:, s:e], cc[:, s:e], x,
                          y[:, s:e], checkpoints[:, s // every:], every)
            if cache:
                decays.append(decay)
        if keep:
            ctx.save_for_backward(u, delta, A, B, C)
            ctx.checkpoints = checkpoints
            ctx.decays = decays
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, grad_y):
        uu, dd, aa, bb, cc = (_np(t) for t in ctx.saved_tensors)
        gy = _np(grad_y)
        grads = (np.empty_like(uu), np.empty_like(dd), np.zeros_like(aa), np.empty_like(bb), np.empty_like(cc))
        gx = np.zeros((uu.shape[0],) + aa.shape, dtype=uu.dtype)
        every = CHECKPOINT_EVERY
        blocks = _blocks(uu.shape[1])
        for k in range(len(blocks) - 1, -1, -1):
            s, e = blocks[k]
            decay = ctx.decays.pop() if ctx.decays else _decay(dd[:, s:e], aa)
            block_grads = (grads[0][:, s:e], grads[1][:, s:e], grads[2], grads[3][:, s:e], grads[4][:, s:e])
            _scan_backward(uu[:, s:e], dd[:, s:e], aa, decay, bb[:, s:e], cc[:, s:e],
                           ctx.checkpoints[:, s // every:], every, gy[:, s:e], gx, block_grads)
        del ctx.checkpoints, ctx.decays
        return tuple(torch.from_numpy(g) for g in grads)


def selective_scan(u, delta, A, B, C, validate: bool = True):
    """Run the selective recurrence with input-dependent ``delta``, ``B`` and ``C``.

    Args:
        u: (batch, L, D) or (L, D) input sequence.
        delta: step sizes, same shape as ``u``; must be positive.
        A: (D, N) diagonal state matrix; must be negative.
        B, C: (batch, L, N) shared by all channels, or (batch, L, G, N) where
            channel ``d`` reads group ``d // (D // G)``.
        validate: check the sign constraints on ``delta`` and ``A``.

    Returns:
        y with the shape of ``u``.  The initial state is zero.
    """
    (u, delta, A, B, C), unbatched, _ = _normalize_shapes(u, delta, A, B, C)
    if u.device.type != "cpu":
        raise NotImplementedError("the numba scan runs on CPU tensors only")
    if validate:
        _check_params(delta, A)
    dtype = torch.promote_types(u.dtype, A.dtype)
    u, delta, A, B, C = (t.to(dtype) for t in (u, delta, A, B, C))
    y = _SelectiveScanFn.apply(u, delta, A, B, C)
    return y[0] if unbatched else y


@dataclass
class ScanSequences:
    """Four unfoldings of an (H, W) map, stacked as (..., 4, H*W, C).

    Direction order: row-major, column-major, reversed row-major,
    reversed column-major.
    """

    seqs: torch.Tensor
    height: int
    width: int

    def direction(self, k: int) -> torch.Tensor:
        return self.seqs[..., k, :, :]


def cross_scan(feature: torch.Tensor) -> ScanSequences:
    """Unfold a channels-last map (..., H, W, C) along four directions."""
    if feature.dim() < 3:
        raise ShapeError(f"expected (..., H, W, C), got {tuple(feature.shape)}")
    *lead, height, width, channels = feature.shape
    if height < 1 or width < 1:
        raise ShapeError("empty spatial extent")
    rows = feature.reshape(*lead, height * width, channels)
    cols = feature.transpose(-3, -2).reshape(*lead, height * width, channels)
    seqs = torch.stack([rows, cols, rows.flip(-2), cols.flip(-2)], dim=-3)
    return ScanSequences(seqs, height, width)


def cross_merge(seqs, height: int | None = None, width: int | None = None) -> torch.Tensor:
    """Refold each direction by inverting its own unfolding and sum the four maps."""
    if isinstance(seqs, ScanSequences):
        height = seqs.height if height is None else height
        width = seqs.width if width is None else width
        seqs = seqs.seqs
    if height is None or width is None:
        raise ShapeError("height and width are required for raw sequence tensors")
    if seqs.dim() < 3 or seqs.shape[-3] != 4 or seqs.shape[-2] != height * width:
        raise ShapeError(f"expected (..., 4, {height * width}, C), got {tuple(seqs.shape)}")
    *lead, _, _, channels = seqs.shape
    rows = seqs[..., 0, :, :] + seqs[..., 2, :, :].flip(-2)
    cols = seqs[..., 1, :, :] + seqs[..., 3, :, :].flip(-2)
    out = rows.reshape(*lead, height, width, channels)
    out = out + cols.reshape(*lead, width, height, channels).transpose(-3, -2)
    return out


def ss2d(feature: torch.Tensor, scan: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """cross_merge(scan(cross_scan(feature))).

    ``scan`` receives the stacked sequences (..., 4, L, C) and must return a
    tensor of the same shape; direction ``k`` is ``[..., k, :, :]``.
    """
    unfolded = cross_scan(feature)
    scanned = scan(unfolded.seqs)
    if scanned.shape != unfolded.seqs.shape:
        raise ShapeError(f"scan changed shape {tuple(unfolded.seqs.shape)} -> {tuple(scanned.shape)}")
    return cross_merge(scanned, unfolded.height, unfolded.width)


class S6(nn.Module):
    """Selective SSM parameters for ``directions`` independent sequences.

    Each direction owns A (D, N), an affine delta projection D -> D followed by
    softplus, and linear B/C projections D -> N.  Calling the module on
    (batch, directions, L, D) scans every direction with its own parameters in
    a single kernel launch (directions are folded into the channel axis).
    """

    def __init__(self, channels: int, state_dim: int = 8, directions: int = 1,
                 dt_min: float = 0.03, dt_max: float = 0.1):
        super().__init__()
        if state_dim < 1:
            raise InvalidParameterError("state_dim must be >= 1")
        self.channels, self.state_dim, self.directions = channels, state_dim, directions
        # A[d, n] = -(n + 1); stored as log(-A) so A stays negative under optimization
        a_init = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(directions * channels, 1)
        self.A_log = nn.Parameter(torch.log(a_init))
        bound = channels ** -0.5
        self.delta_weight = nn.Parameter(torch.empty(directions, channels, channels).uniform_(-bound, bound) * 0.1)
        dt = torch.exp(torch.empty(directions, channels).uniform_(math.log(dt_min), math.log(dt_max)))
        self.delta_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # softplus^-1(dt)
        self.B_weight = nn.Parameter(torch.empty(directions, channels, state_dim).uniform_(-bound, bound))
        self.C_weight = nn.Parameter(torch.empty(directions, channels, state_dim).uniform_(-bound, bound))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def project(self, seqs: torch.Tensor):
        """Input-dependent (delta, B, C) for seqs of shape (batch, K, L, D)."""
        delta = F.softplus(torch.einsum("bkld,kde->bkle", seqs, self.delta_weight) + self.delta_bias[:, None, :])
        B = torch.einsum("bkld,kdn->bkln", seqs, self.B_weight)
        C = torch.einsum("bkld,kdn->bkln", seqs, self.C_weight)
        return delta, B, C

    def forward(self, seqs: torch.Tensor, scan_fn=selective_scan) -> torch.Tensor:
        batch, directions, length, channels = seqs.shape
        if directions != self.directions or channels != self.channels:
            raise ShapeError(f"expected (batch, {self.directions}, L, {self.channels}), got {tuple(seqs.shape)}")
        delta, B, C = self.project(seqs)

        def fold(t):  # (b, K, L, X) -> (b, L, K*X)
            return t.permute(0, 2, 1, 3).reshape(batch, length, directions * t.shape[-1])

        y = scan_fn(
            fold(seqs),
            fold(delta),
            self.A,
            B.permute(0, 2, 1, 3),
            C.permute(0, 2, 1, 3),
        )
        return y.reshape(batch, length, directions, channels).permute(0, 2, 1, 3)


class SS2D(nn.Module):
    """Cross-scan, four independently parameterized S6 scans, cross-merge."""

    def __init__(self, channels: int, state_dim: int = 8):
        super().__init__()
        self.s6 = S6(channels, state_dim, directions=4)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        # feature: (batch, H, W, C)
        return ss2d(feature, self.s6)
