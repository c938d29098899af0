"""Selective state-space scan and the per-chunk Mamba block.

The recurrence is the diagonal selective scan with zero-order-hold
discretisation of the decay:

    delta_t = softplus(dt_proj(x_t))
    h_t     = exp(delta_t * A) * h_{t-1} + (delta_t * x_t) B_t
    y_t     = C_t . h_t + D_skip * x_t

with ``A = -exp(A_log)`` and ``h_0 = 0``.  The time loop runs strictly
sequentially; it is compiled with numba and wrapped in a custom autograd
function whose backward pass is the reverse-time adjoint recurrence; the
per-step decay ``exp(delta_t * A)`` is formed outside the loop by torch.
"""
from __future__ import annotations

import math

import numba
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

SCAN_ORDERS = ("row_major", "column_major")


@numba.njit(cache=True)
def _scan_forward(decay, u, B, C):
    nb, L, D, N = decay.shape
    zero = u.dtype.type(0)
    y = np.zeros((nb, L, D), dtype=u.dtype)
    hs = np.empty((nb, L, D, N), dtype=u.dtype)
    for b in range(nb):
        h = np.zeros((D, N), dtype=u.dtype)
        for t in range(L):
            for d in range(D):
                ut = u[b, t, d]
                acc = zero
                for n in range(N):
                    hn = decay[b, t, d, n] * h[d, n] + ut * B[b, t, n]
                    h[d, n] = hn
                    hs[b, t, d, n] = hn
                    acc += C[b, t, n] * hn
                y[b, t, d] = acc
    return y, hs


@numba.njit(cache=True)
def _scan_backward(decay, u, B, C, hs, gy):
    nb, L, D, N = decay.shape
    zero = u.dtype.type(0)
    g_decay = np.zeros_like(decay)
    g_u = np.zeros_like(u)
    g_B = np.zeros_like(B)
    g_C = np.zeros_like(C)
    for b in range(nb):
        # on entry to step t, gh holds decay_{t+1} * dL/dh_{t+1}
        gh = np.zeros((D, N), dtype=u.dtype)
        for t in range(L - 1, -1, -1):
            for d in range(D):
                ut = u[b, t, d]
                gyt = gy[b, t, d]
                gu = zero
                for n in range(N):
                    g = gh[d, n] + C[b, t, n] * gyt
                    g_C[b, t, n] += gyt * hs[b, t, d, n]
                    if t > 0:
                        g_decay[b, t, d, n] = g * hs[b, t - 1, d, n]
                    gu += g * B[b, t, n]
                    g_B[b, t, n] += g * ut
                    gh[d, n] = g * decay[b, t, d, n]
                g_u[b, t, d] = gu
    return g_decay, g_u, g_B, g_C


class _ScanFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, decay, u, B, C):
        args = [a.detach().contiguous().cpu().numpy() for a in (decay, u, B, C)]
        y, hs = _scan_forward(*args)
        ctx.save_for_backward(decay, u, B, C, torch.from_numpy(hs))
        return torch.from_numpy(y).to(u.device)

    @staticmethod
    def backward(ctx, gy):
        *inputs, hs = ctx.saved_tensors
        args = [a.detach().contiguous().cpu().numpy() for a in inputs]
        grads = _scan_backward(*args, hs.numpy(), gy.detach().contiguous().cpu().numpy())
        return tuple(torch.from_numpy(g).to(gy.device) for g in grads)


def scan_recurrence(decay, u, B, C):
    """Run ``h_t = decay_t * h_{t-1} + u_t B_t`` and read out ``y_t = C_t . h_t``.

    Shapes: ``decay`` (b, L, D, N), ``u`` (b, L, D), ``B`` and ``C`` (b, L, N).
    Returns ``y`` of shape (b, L, D).
    """
    return _ScanFunction.apply(decay, u, B, C)


def scan_recurrence_reference(decay, u, B, C):
    """Plain torch loop of :func:`scan_recurrence`, differentiable by autograd."""
    nb, L, D, N = decay.shape
    h = u.new_zeros(nb, D, N)
    ys = []
    for t in range(L):
        h = decay[:, t] * h + u[:, t, :, None] * B[:, t, None, :]
        ys.append((h * C[:, t, None, :]).sum(-1))
    return torch.stack(ys, dim=1)


class ScanParams(nn.Module):
    """Parameters of one selective scan over ``dim`` channels."""

    def __init__(self, dim: int, state_dim: int = 8, dt_init: float = 1e-2):
        super().__init__()
        if dim < 1 or state_dim < 1:
            raise ConfigError(f"dim and state_dim must be >= 1, got {dim}, {state_dim}")
        self.dim = dim
        self.state_dim = state_dim
        # S4D-real: A = -(1..state_dim) for every channel
        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(dim, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.dt_proj = nn.Linear(dim, dim)
        self.B_proj = nn.Linear(dim, state_dim, bias=False)
        self.C_proj = nn.Linear(dim, state_dim, bias=False)
        self.D_skip = nn.Parameter(torch.ones(dim))
        with torch.no_grad():
            self.dt_proj.weight.mul_(0.1)
            # inverse softplus so that delta starts near dt_init
            self.dt_proj.bias.fill_(math.log(math.expm1(dt_init)))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)


def selective_scan(x: torch.Tensor, params: ScanParams, reference: bool = False) -> torch.Tensor:
    """Selective scan of a sequence ``x`` of shape (..., L, D).

    ``reference=True`` swaps the compiled recurrence for the plain torch loop.
    """
    if x.dim() < 2 or x.shape[-1] != params.dim:
        raise ConfigError(f"expected (..., L, {params.dim}) input, got {tuple(x.shape)}")
    if x.shape[-2] < 1:
        raise ConfigError("sequence length must be >= 1")
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).reshape(-1, *x.shape[-2:]).any(0).any(-1)
        step = int(torch.nonzero(bad)[0, 0])
        raise NumericError(f"non-finite scan input at step {step}")
    lead = x.shape[:-2]
    L, D = x.shape[-2:]
    xs = x.reshape(-1, L, D)
    delta = F.softplus(params.dt_proj(xs))
    Bt = params.B_proj(xs)
    Ct = params.C_proj(xs)
    u = delta * xs
    run = scan_recurrence_reference if reference else scan_recurrence
    decay = torch.exp(delta[..., None] * params.A)
    y = run(decay, u, Bt, Ct) + params.D_skip * xs
    return y.reshape(*lead, L, D)


class MambaBlock(nn.Module):
    """Gated Mamba branch applied to one channel chunk (c x H x W).

    top  = scan(SiLU(conv1x1(Linear(flatten(F)))))
    gate = SiLU(Linear(flatten(F)))
    out  = unflatten(Linear(top * gate))

    Flattening is single-direction: row-major (raster) by default,
    ``scan_order="column_major"`` walks down columns instead.
    """

    def __init__(self, channels: int, state_dim: int = 8, expand: int = 1,
                 scan_order: str = "row_major"):
        super().__init__()
        if scan_order not in SCAN_ORDERS:
            raise ConfigError(f"scan_order must be one of {SCAN_ORDERS}, got {scan_order!r}")
        inner = channels * expand
        self.channels = channels
        self.scan_order = scan_order
        self.in_proj = nn.Linear(channels, inner)
        self.conv = nn.Conv2d(inner, inner, 1)
        self.gate_proj = nn.Linear(channels, inner)
        self.scan = ScanParams(inner, state_dim)
        self.out_proj = nn.Linear(inner, channels)

    def forward(self, x: torch.Tensor, reference: bool = False) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ConfigError(f"expected (B, {self.channels}, H, W) input, got {tuple(x.shape)}")
        if self.scan_order == "column_major":
            return self._raster(x.transpose(-1, -2), reference).transpose(-1, -2)
        return self._raster(x, reference)

    def _raster(self, x: torch.Tensor, reference: bool) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)  # (B, HW, c)
        top = self.in_proj(seq)
        top = top.transpose(1, 2).reshape(b, -1, h, w)
        top = F.silu(self.conv(top)).flatten(2).transpose(1, 2)
        top = selective_scan(top, self.scan, reference=reference)
        gate = F.silu(self.gate_proj(seq))
        out = self.out_proj(top * gate)
        return out.transpose(1, 2).reshape(b, c, h, w)
