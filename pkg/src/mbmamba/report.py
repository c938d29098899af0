"""Per-channel activation of MemVSSM outputs (ReLU, then global average pooling)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .memvssm import MemVSSM
from .model import MBMamba

DEAD_THRESHOLD = 1e-3


@dataclass
class ChannelReport:
    block: str
    activations: np.ndarray
    threshold: float = DEAD_THRESHOLD

    @property
    def dead_count(self) -> int:
        return int((self.activations < self.threshold).sum())

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "activation"])
            for i, a in enumerate(self.activations):
                w.writerow([i, f"{a:.9g}"])
        return path


def channel_activations(features: torch.Tensor) -> np.ndarray:
    """ReLU then mean over H, W (and over the batch) -> one value per channel."""
    x = features if features.dim() == 4 else features.unsqueeze(0)
    return torch.relu(x.detach()).mean(dim=(0, 2, 3)).double().numpy()


def probe_blocks(model: MBMamba) -> list[str]:
    return [name for name, m in model.named_modules() if isinstance(m, MemVSSM)]


def channel_activation_report(model: MBMamba, probes, block: str | None = None,
                              threshold: float = DEAD_THRESHOLD) -> ChannelReport:
    """Average channel activation of one MemVSSM output over ``probes``.

    ``probes`` is a (B, 3, H, W) tensor or a sequence of (3, H, W) arrays with
    H, W divisible by 16.  ``block`` defaults to the last MemVSSM of the last
    sub-decoder (finest scale).
    """
    names = probe_blocks(model)
    block = block or names[-1]
    if block not in names:
        raise ConfigError(f"unknown block {block!r}; valid ids: {', '.join(names)}")
    module = model.get_submodule(block)
    dtype = next(model.parameters()).dtype
    if not torch.is_tensor(probes):
        probes = torch.from_numpy(np.stack([np.ascontiguousarray(p) for p in probes]))
    probes = probes.to(dtype)
    captured: list[np.ndarray] = []
    handle = module.register_forward_hook(lambda mod, inp, out: captured.append(channel_activations(out)))
    try:
        with torch.no_grad():
            for img in probes:
                model(img[None])
    finally:
        handle.remove()
    return ChannelReport(block, np.mean(captured, axis=0), threshold)
