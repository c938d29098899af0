"""Restoration losses: Charbonnier, Laplacian edge, Fourier, and the Ising regulariser.

Every loss accepts (C, H, W) or batched (B, C, H, W) tensors.  Batched inputs
are reduced per sample and then averaged over the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError

# half of each neighbourhood; the other half is the same pairs seen from the other end
_HALF_OFFSETS = {
    "four_connected": [(0, 1), (1, 0)],
    "eight_connected": [(0, 1), (1, 0), (1, 1), (1, -1)],
}
NEIGHBORHOODS = tuple(_HALF_OFFSETS)

_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class LossWeights:
    lambda_freq: float = 0.1
    delta_edge: float = 0.05
    epsilon: float = 1e-3
    ising_weight: float = 1.0
    neighborhood: str = "four_connected"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        for name in ("lambda_freq", "delta_edge", "ising_weight"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.neighborhood not in _HALF_OFFSETS:
            raise ConfigError(f"unknown neighborhood {self.neighborhood!r}")


@dataclass
class LossReport:
    total: torch.Tensor
    charbonnier: torch.Tensor
    edge: torch.Tensor
    frequency: torch.Tensor
    ising: torch.Tensor

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise ConfigError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
    return x


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _batched(a), _batched(b)


def _offsets(neighborhood: str):
    try:
        return _HALF_OFFSETS[neighborhood]
    except KeyError:
        raise ConfigError(f"unknown neighborhood {neighborhood!r}") from None


def ising_loss(img: torch.Tensor, neighborhood: str = "four_connected") -> torch.Tensor:
    """Sum of |I(p) - I(q)| over pixels p, in-bounds neighbours q and channels, / (C H W).

    Each unordered neighbour pair is seen from both ends, hence the factor 2.
    """
    x = _batched(img)
    if not torch.isfinite(x).all():
        raise NumericError("non-finite value in ising_loss input")
    _, c, h, w = x.shape
    total = x.new_zeros(x.shape[0])
    for dy, dx in _offsets(neighborhood):
        if dy >= h or abs(dx) >= w:
            continue
        a = x[:, :, dy:, max(dx, 0):w + min(dx, 0)]
        b = x[:, :, :h - dy, max(-dx, 0):w + min(-dx, 0)]
        total = total + (a - b).abs().sum(dim=(1, 2, 3))
    return (2.0 * total / (c * h * w)).mean()


def ising_loss_oracle(img, neighborhood: str = "four_connected") -> float:
    """Literal per-pixel, per-neighbour, per-channel loop.  Slow; for tests."""
    a = np.asarray(img.detach().cpu() if torch.is_tensor(img) else img, dtype=np.float64)
    if a.ndim != 3:
        raise ConfigError(f"expected (C,H,W), got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("non-finite value in ising_loss_oracle input")
    half = _offsets(neighborhood)
    full = half + [(-dy, -dx) for dy, dx in half]
    C, H, W = a.shape
    loss = 0.0
    for x in range(H):
        for y in range(W):
            for dx, dy in full:
                xn, yn = x + dx, y + dy
                if not (0 <= xn < H and 0 <= yn < W):
                    continue
                for c in range(C):
                    loss += abs(a[c, x, y] - a[c, xn, yn])
    return loss / (C * H * W)


def charbonnier_loss(pred, target, epsilon: float = 1e-3) -> torch.Tensor:
    p, t = _check_pair(pred, target)
    return torch.sqrt((p - t).pow(2) + epsilon ** 2).mean()


def laplacian(x: torch.Tensor) -> torch.Tensor:
    """3x3 discrete Laplacian per channel with replicate padding."""
    x = _batched(x)
    c = x.shape[1]
    k = _LAPLACIAN.to(x).expand(c, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=c)


def edge_loss(pred, target, epsilon: float = 1e-3) -> torch.Tensor:
    p, t = _check_pair(pred, target)
    return charbonnier_loss(laplacian(p), laplacian(t), epsilon)


def frequency_loss(pred, target) -> torch.Tensor:
    """Mean modulus of the difference of per-channel 2-D DFT coefficients."""
    p, t = _check_pair(pred, target)
    return (torch.fft.fft2(p) - torch.fft.fft2(t)).abs().mean()


def total_loss(pred, target, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    charb = charbonnier_loss(pred, target, w.epsilon)
    edge = edge_loss(pred, target, w.epsilon)
    freq = frequency_loss(pred, target)
    ising = ising_loss(pred, w.neighborhood)
    total = charb + w.delta_edge * edge + w.lambda_freq * freq + w.ising_weight * ising
    return LossReport(total, charb, edge, freq, ising)
