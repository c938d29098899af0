"""Central finite-difference checks of autograd gradients (float64)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .losses import (NEIGHBORHOODS, charbonnier_loss, edge_loss, frequency_loss, ising_loss,
                     total_loss)
from .memvssm import FCAM, DecoderBlock, DecoderBlockConfig, MemVSSM
from .model import MBMamba, ModelConfig
from .ssm import MambaBlock

COMPONENTS = ("losses", "mamba", "fcam", "memvssm", "decoder_block", "end_to_end")
STEP = 1e-5
# denominators below this are treated as this, so vanishing gradients compare absolutely
REL_FLOOR = 1e-8
TOLERANCE = {"end_to_end": 1e-3}
DEFAULT_TOL = 1e-4


@dataclass
class GradcheckEntry:
    name: str
    max_rel_err: float = 0.0
    n_checked: int = 0
    skipped: bool = False
    reason: str = ""


@dataclass
class GradcheckReport:
    component: str
    seed: int
    tolerance: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries if not e.skipped]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        lines = [f"{self.component} (seed {self.seed}): max rel err {self.max_rel_err:.3e} "
                 f"[tol {self.tolerance:g}] {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            status = f"SKIPPED ({e.reason})" if e.skipped else f"{e.max_rel_err:.3e} over {e.n_checked}"
            lines.append(f"  {e.name}: {status}")
        return "\n".join(lines)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = REL_FLOOR):
    """Elementwise |a - n| scaled by the largest gradient magnitude of the tensor.

    Scaling per tensor rather than per element keeps the O(eps/h) round-off of
    the central difference from dominating near-zero entries.
    """
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
    return (analytic - numeric).abs() / scale


def check_tensors(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                  h: float = STEP, fraction: float = 1.0,
                  rng: Optional[np.random.Generator] = None) -> list[GradcheckEntry]:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``tensors`` are leaf tensors that ``fn`` reads; they are perturbed in place.
    With ``fraction < 1`` a random subset of elements (at least one per tensor)
    is checked.
    """
    rng = rng or np.random.default_rng(0)
    leaves = list(tensors.values())
    for t in leaves:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(fn(), leaves, allow_unused=True)
    entries = []
    for (name, t), g in zip(tensors.items(), analytic):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        if fraction >= 1.0:
            idx = np.arange(n)
        else:
            k = max(1, int(round(fraction * n)))
            idx = rng.choice(n, size=k, replace=False)
        flat = t.detach().view(-1)
        num = torch.empty(len(idx), dtype=t.dtype)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * h)
        err = relative_error(g.reshape(-1)[torch.as_tensor(idx)], num)
        entries.append(GradcheckEntry(name, float(err.max()), len(idx)))
    return entries


def _probe(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


@torch.no_grad()
def randomize_(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.5):
    """Move every parameter off its structured initialisation to a generic point."""
    for p in module.parameters():
        p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def _module_check(module: torch.nn.Module, inputs: dict[str, torch.Tensor],
                  call: Callable[..., torch.Tensor], seed: int, fraction: float = 1.0):
    gen = torch.Generator().manual_seed(seed + 1)
    randomize_(module, gen)
    weights = _probe(call(**inputs), gen)

    def fn():
        return (call(**inputs) * weights).sum()

    tensors = {f"input.{k}": v for k, v in inputs.items()}
    tensors.update({f"param.{n}": p for n, p in module.named_parameters() if p.requires_grad})
    return check_tensors(fn, tensors, fraction=fraction, rng=np.random.default_rng(seed))


def min_neighbor_gap(img: torch.Tensor, neighborhood: str = "eight_connected") -> float:
    x = img.detach()
    gaps = [(x[..., :, 1:] - x[..., :, :-1]).abs().min(), (x[..., 1:, :] - x[..., :-1, :]).abs().min()]
    if neighborhood == "eight_connected":
        gaps += [(x[..., 1:, 1:] - x[..., :-1, :-1]).abs().min(),
                 (x[..., 1:, :-1] - x[..., :-1, 1:]).abs().min()]
    return float(min(gaps))


def check_losses(pred: torch.Tensor, target: torch.Tensor, h: float = STEP) -> list[GradcheckEntry]:
    pred = pred.detach().clone().double()
    target = target.detach().clone().double()
    pair = {"pred": pred, "target": target}
    entries = []
    for name, f in (("charbonnier", charbonnier_loss), ("edge", edge_loss),
                    ("frequency", frequency_loss)):
        for e in check_tensors(lambda: f(pred, target), pair, h):
            e.name = f"{name}.{e.name}"
            entries.append(e)
    for nb in NEIGHBORHOODS:
        name = f"ising[{nb}].pred"
        # |.| has a kink at 0; a central difference straddling it is meaningless
        if min_neighbor_gap(pred, nb) <= 2 * h:
            entries.append(GradcheckEntry(name, skipped=True, reason="non-smooth: neighbour difference near 0"))
            continue
        e = check_tensors(lambda: ising_loss(pred, nb), {"pred": pred}, h)[0]
        e.name = name
        entries.append(e)
    return entries


def toy_model_config() -> ModelConfig:
    return ModelConfig(base_width=8, chunks=2, bank_depth=1, state_dim=4,
                       encoder_blocks_per_scale=1, decoder_blocks_per_stage=1)


def run_gradcheck(component: str, seed: int = 0) -> GradcheckReport:
    """Gradient check of one component on a small random float64 instance."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rand = lambda *s: torch.randn(*s, generator=gen, dtype=torch.float64)  # noqa: E731
    report = GradcheckReport(component, seed, TOLERANCE.get(component, DEFAULT_TOL))

    if component == "losses":
        # redraw until every neighbour difference is well clear of the |.| kink
        pred = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
        while min_neighbor_gap(pred) <= 100 * STEP:
            pred = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
        report.entries = check_losses(pred, torch.rand(3, 8, 8, generator=gen, dtype=torch.float64))
    elif component == "mamba":
        m = MambaBlock(2, state_dim=4).double()
        report.entries = _module_check(m, {"x": rand(1, 2, 4, 4)}, lambda x: m(x), seed)
    elif component == "fcam":
        m = FCAM(2).double()
        report.entries = _module_check(
            m, {"cur": rand(1, 2, 4, 4), "hist": rand(1, 2, 4, 4)},
            lambda cur, hist: m(cur, [hist]), seed)
    elif component == "memvssm":
        m = MemVSSM(DecoderBlockConfig(4, chunks=2, bank_depth=1, state_dim=4)).double()
        report.entries = _module_check(m, {"x": rand(1, 4, 4, 4)}, lambda x: m(x), seed)
    elif component == "decoder_block":
        m = DecoderBlock(DecoderBlockConfig(4, chunks=2, bank_depth=1, state_dim=4)).double()
        report.entries = _module_check(m, {"x": rand(1, 4, 4, 4)}, lambda x: m(x), seed)
    else:
        model = MBMamba(toy_model_config()).double()
        img = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        target = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)

        def fn():
            outs = model(img).restored
            return sum(total_loss(o, target).total for o in outs) / len(outs)

        params = dict(model.named_parameters())
        report.entries = check_tensors(fn, params, fraction=0.01, rng=np.random.default_rng(seed))
    return report
