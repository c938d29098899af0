"""Scaled experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from .data import generate_dataset, load_manifest
from .losses import LossWeights
from .model import ModelConfig, freeze_encoder
from .train import TrainConfig, build_model, evaluate, train


def toy_config(**overrides) -> ModelConfig:
    """C=16, N=4, K=1, state 8, one sub-decoder."""
    base = dict(base_width=16, n_subdecoders=1, chunks=4, bank_depth=1, state_dim=8)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class SmokeResult:
    input_psnr: float
    psnr: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def gain(self, run: str) -> float:
        return self.psnr[run] - self.input_psnr

    @property
    def ising_cost(self) -> float:
        """PSNR lost by adding the Ising term (negative means it helped)."""
        return self.psnr["no_ising"] - self.psnr["ising"]

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds.values())


def make_smoke_data(root, n_pairs: int = 8, size: int = 64, seed: int = 1) -> Path:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        generate_dataset(root, n_train=n_pairs, n_val=n_pairs, size=size, seed=seed)
    return manifest


def overfit_smoke(root, iters: int = 2000, batch_size: int = 4, seed: int = 0,
                  data_seed: int = 1, model: Optional[ModelConfig] = None,
                  log_every: int = 100) -> SmokeResult:
    """Train the toy model on 8 pairs with and without the Ising term.

    Returns training-split PSNR of each run against the blurred-input PSNR.
    """
    root = Path(root)
    manifest = make_smoke_data(root / "data", seed=data_seed)
    model = model or toy_config()
    result = None
    for run, ising in (("ising", 1.0), ("no_ising", 0.0)):
        cfg = TrainConfig(manifest=str(manifest), out_dir=str(root / run), total_iters=iters,
                          batch_size=batch_size, patch_size=64, seed=seed,
                          checkpoint_every=max(iters, 1), loss=LossWeights(ising_weight=ising),
                          model=replace(model))
        t0 = time.perf_counter()
        log = train(cfg, log_every=log_every)
        elapsed = time.perf_counter() - t0
        final = log.final["train"]
        if result is None:
            result = SmokeResult(final["input_psnr"])
        result.psnr[run] = final["psnr"]
        result.seconds[run] = elapsed
        result.checkpoints[run] = str(root / run / "checkpoint.npz")
    return result


@dataclass
class TwoRegimeResult:
    init_val_psnr: float
    final_val_psnr: float
    input_val_psnr: float
    steps_checked: int
    encoder_changes: int

    @property
    def improvement(self) -> float:
        return self.final_val_psnr - self.init_val_psnr


def _encoder_snapshot(model) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()
            if k.startswith(("shallow.", "encoder."))}


def two_regime(stage1_checkpoint, manifest, out_dir, iters: int = 400, batch_size: int = 4,
               seed: int = 1, model: Optional[ModelConfig] = None,
               log_every: int = 100) -> TwoRegimeResult:
    """Stage 2: fresh decoder on the frozen stage-1 encoder.

    Every step compares all encoder tensors bitwise against the stage-1 values.
    """
    model_cfg = replace(model or toy_config(), freeze_encoder=True)
    cfg = TrainConfig(manifest=str(manifest), out_dir=str(out_dir), total_iters=iters,
                      batch_size=batch_size, patch_size=64, seed=seed,
                      checkpoint_every=max(iters, 1), encoder_checkpoint=str(stage1_checkpoint),
                      model=model_cfg)
    # the exact model train() will start from: same seed, same encoder load
    init = freeze_encoder(build_model(cfg.model, cfg.dtype, cfg.seed), stage1_checkpoint)
    reference = _encoder_snapshot(init)
    m = load_manifest(manifest)
    init_metrics = evaluate(init, m, "val")

    changes = 0
    checked = 0

    def check(done, live, rec):
        nonlocal changes, checked
        snap = _encoder_snapshot(live)
        changes += sum(not torch.equal(snap[k], reference[k]) for k in reference)
        checked += 1

    log = train(cfg, manifest=m, on_step=check, log_every=log_every)
    return TwoRegimeResult(init_metrics["psnr"], log.final["val"]["psnr"],
                           init_metrics["input_psnr"], checked, changes)
