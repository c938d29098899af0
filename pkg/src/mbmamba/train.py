"""Training loop, optimiser, schedule and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetManifest, augment_flip, load_manifest, sample_patch
from .errors import ConfigError, NumericError
from .losses import LossWeights, total_loss
from .metrics import PSNR_CAP, capped, psnr, ssim
from .model import MBMamba, ModelConfig, freeze_encoder

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    manifest: str = "data/manifest.jsonl"
    out_dir: str = "runs/default"
    lr_init: float = 5e-4
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_iters: int = 2000
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 500
    dtype: str = "float32"
    # stage-2: load shallow conv + encoder from this checkpoint
    encoder_checkpoint: Optional[str] = None
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.total_iters < 0 or self.batch_size < 1 or self.patch_size < 16:
            raise ConfigError("total_iters >= 0, batch_size >= 1 and patch_size >= 16 required")
        if self.patch_size % 16:
            raise ConfigError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def cosine_lr(step: int, total: int, lr_init: float = 5e-4, lr_final: float = 1e-7) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    if total < 0 or not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr_init
    w = 0.5 * (1.0 + math.cos(math.pi * step / total))
    # weighted form hits both endpoints exactly in floating point
    return lr_init * w + lr_final * (1.0 - w)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, in place.  Parameters with ``None`` gradient are skipped."""
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    @property
    def steps(self) -> list[int]:
        return [r["step"] for r in self.records]


def build_model(cfg: ModelConfig, dtype: str = "float32", seed: int = 0) -> MBMamba:
    torch.manual_seed(seed)
    return MBMamba(ModelConfig(**asdict(cfg))).to(_DTYPES[dtype])


def model_from_checkpoint(path) -> tuple[MBMamba, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = MBMamba(ModelConfig(**ckpt.model))
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else torch.float32
    model = model.to(dtype)
    missing, unexpected = model.load_state_dict(ckpt.params, strict=False)
    if missing or unexpected:
        raise ConfigError(f"checkpoint {path} does not match its model config "
                          f"(missing {missing[:3]}, unexpected {unexpected[:3]})")
    return model, ckpt


def _batch(pairs, cfg: TrainConfig, step: int, dtype):
    # one generator per step keeps resumed runs on the same sample stream
    rng = np.random.default_rng([cfg.seed, step])
    sharp, blurred = [], []
    for _ in range(cfg.batch_size):
        pair = pairs[int(rng.integers(len(pairs)))]
        s, b = augment_flip(sample_patch(pair, cfg.patch_size, rng), rng)
        sharp.append(np.ascontiguousarray(s))
        blurred.append(np.ascontiguousarray(b))
    to = lambda xs: torch.from_numpy(np.stack(xs)).to(dtype)  # noqa: E731
    return to(sharp), to(blurred)


def sub_decoder_loss(restored: list[torch.Tensor], target: torch.Tensor, weights: LossWeights):
    """Mean of the composite loss over all sub-decoder outputs, plus a mean report."""
    reports = [total_loss(r, target, weights) for r in restored]
    mean = {k: sum(getattr(r, k) for r in reports) / len(reports)
            for k in ("total", "charbonnier", "edge", "frequency", "ising")}
    return mean["total"], {k: float(v.detach()) for k, v in mean.items()}


def _save(model: MBMamba, state: AdamState, step: int, cfg: TrainConfig, path: Path) -> Path:
    ckpt = Checkpoint(dict(model.state_dict()), step, asdict(model.cfg), cfg.to_dict(),
                      dict(state.m), dict(state.v))
    ckpt.train["adam_step"] = state.step
    return save_checkpoint(path, ckpt)


def train(cfg: TrainConfig, resume: Optional[str] = None, manifest: DatasetManifest | None = None,
          log_every: int = 100, on_step: Optional[Callable[[int, MBMamba, dict], None]] = None) -> RunLog:
    """Run (or resume) training; writes ``log.jsonl`` and ``checkpoint.npz`` in ``out_dir``.

    ``on_step(done, model, record)`` is called after every update (and after
    any periodic checkpoint for that step).
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = _DTYPES[cfg.dtype]
    manifest = manifest or load_manifest(cfg.manifest)
    pairs = manifest.load_pairs("train")
    if not pairs:
        raise ConfigError("manifest has no training pairs")

    model = build_model(cfg.model, cfg.dtype, cfg.seed)
    state = AdamState()
    start = 0
    if resume is not None:
        model, ckpt = model_from_checkpoint(resume)
        model = model.to(dtype)
        start = ckpt.step
        state = AdamState(int(ckpt.train.get("adam_step", start)), dict(ckpt.adam_m), dict(ckpt.adam_v))
    elif cfg.encoder_checkpoint is not None:
        freeze_encoder(model, cfg.encoder_checkpoint)
        if not cfg.model.freeze_encoder:
            for p in model.encoder_parameters():
                p.requires_grad_(True)
            model.cfg.freeze_encoder = False
    if start > cfg.total_iters:
        raise ConfigError(f"checkpoint step {start} beyond total_iters {cfg.total_iters}")

    ckpt_path = out / "checkpoint.npz"
    log_path = out / "log.jsonl"
    runlog = RunLog()
    if resume is None:
        _save(model, state, 0, cfg, ckpt_path)
        log_path.write_text("")
    named = dict(model.named_parameters())
    t0 = time.perf_counter()
    with open(log_path, "a") as fh:
        for step in range(start, cfg.total_iters):
            lr = cosine_lr(step, cfg.total_iters, cfg.lr_init, cfg.lr_final)
            sharp, blurred = _batch(pairs, cfg, step, dtype)
            model.zero_grad(set_to_none=True)
            try:
                out_imgs = model(blurred)
                loss, report = sub_decoder_loss(out_imgs.restored, sharp, cfg.loss)
                if not math.isfinite(report["total"]):
                    raise NumericError("non-finite loss")
                loss.backward()
                grads = {n: p.grad for n, p in named.items() if p.requires_grad}
                adam_step({n: named[n] for n in grads}, grads, state, lr,
                          (cfg.beta1, cfg.beta2), cfg.adam_eps)
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step}; last good checkpoint: {ckpt_path}") from exc
            rec = {"step": step, "lr": lr, "loss": report, "time": time.perf_counter() - t0}
            runlog.records.append(rec)
            fh.write(json.dumps(rec) + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d lr %.3g loss %.5f", step, lr, report["total"])
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                _save(model, state, done, cfg, ckpt_path)
            if on_step is not None:
                on_step(done, model, rec)
        _save(model, state, cfg.total_iters, cfg, ckpt_path)
        runlog.final = {split: evaluate(model, manifest, split)
                        for split in ("train", "val") if manifest.split(split)}
        fh.write(json.dumps({"final": runlog.final}) + "\n")
    return runlog


def _pad16(x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
    h, w = x.shape[-2:]
    ph = max(16, -(-h // 16) * 16) - h
    pw = max(16, -(-w // 16) * 16) - w
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, h, w


@torch.no_grad()
def restore(model: MBMamba, img: np.ndarray) -> np.ndarray:
    """Restored image from the last sub-decoder, clipped to [0, 1]."""
    dtype = next(model.parameters()).dtype
    x, h, w = _pad16(torch.from_numpy(np.ascontiguousarray(img)).to(dtype)[None])
    out = model(x).restored[-1][0, :, :h, :w]
    return out.clamp(0, 1).double().numpy()


def evaluate(model_or_ckpt, manifest, split: str = "val") -> dict:
    """Mean PSNR/SSIM of restored and of blurred inputs over one manifest split.

    PSNR of identical images is capped at 100 dB so the result stays finite.
    """
    model = model_or_ckpt
    if not isinstance(model, MBMamba):
        model, _ = model_from_checkpoint(model_or_ckpt)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    pairs = manifest.load_pairs(split)
    if not pairs:
        raise ConfigError(f"manifest split {split!r} is empty")
    was_training = model.training
    model.eval()
    rows = []
    for sharp, blurred in pairs:
        out = restore(model, blurred)
        rows.append((capped(psnr(out, sharp)), ssim(out, sharp),
                     capped(psnr(blurred, sharp)), ssim(blurred, sharp)))
    model.train(was_training)
    r = np.mean(rows, axis=0)
    return {"psnr": float(r[0]), "ssim": float(r[1]), "input_psnr": float(r[2]),
            "input_ssim": float(r[3]), "n": len(rows), "psnr_cap": PSNR_CAP}
