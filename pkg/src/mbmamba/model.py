"""Full deblurring network: shallow conv, five-scale encoder, chained sub-decoders."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .memvssm import DecoderBlock, DecoderBlockConfig

ENCODER_SCALES = 5
DECODER_STAGES = 4


@dataclass
class ModelConfig:
    base_width: int = 16
    n_subdecoders: int = 1
    chunks: int = 4
    bank_depth: int = 1
    state_dim: int = 8
    encoder_blocks_per_scale: int = 2
    decoder_blocks_per_stage: int = 2
    ffn_expansion: float = 2.0
    scan_order: str = "row_major"
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.n_subdecoders not in (1, 2, 4):
            raise ConfigError(f"n_subdecoders must be 1, 2 or 4, got {self.n_subdecoders}")
        for name in ("base_width", "chunks", "bank_depth", "state_dim",
                     "encoder_blocks_per_scale", "decoder_blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for width in self.decoder_widths:
            if width % self.chunks:
                raise ConfigError(f"stage width {width} not divisible by chunks={self.chunks}")
        self.block_config(self.base_width)  # validates scan order and expansion

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_width * 2 ** k for k in range(ENCODER_SCALES)]

    @property
    def decoder_widths(self) -> list[int]:
        """Coarse to fine: 8C, 4C, 2C, C."""
        return [self.base_width * 2 ** k for k in reversed(range(DECODER_STAGES))]

    def block_config(self, width: int) -> DecoderBlockConfig:
        return DecoderBlockConfig(width, self.chunks, self.bank_depth, self.state_dim,
                                  self.ffn_expansion, self.scan_order)


@dataclass
class RestoredOutputs:
    residuals: list[torch.Tensor]
    restored: list[torch.Tensor]
    features: list[list[torch.Tensor]] = field(default_factory=list)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Encoder(nn.Module):
    """Residual conv blocks per scale with strided 2x2 downsampling in between."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.encoder_widths
        self.stages = nn.ModuleList(
            nn.Sequential(*[ResBlock(w) for _ in range(cfg.encoder_blocks_per_scale)])
            for w in widths)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[k], widths[k + 1], 2, stride=2) for k in range(len(widths) - 1))

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for k, stage in enumerate(self.stages):
            if k:
                x = self.down[k - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class SubDecoder(nn.Module):
    """Four stages, coarse to fine: upsample, fuse skips, decoder blocks; then a 3x3 head."""

    def __init__(self, cfg: ModelConfig, chained: bool):
        super().__init__()
        enc = cfg.encoder_widths
        dec = cfg.decoder_widths
        self.chained = chained
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.blocks = nn.ModuleList()
        prev_width = enc[-1]
        for k, width in enumerate(dec):
            skip_width = enc[DECODER_STAGES - 1 - k]
            self.up.append(nn.Conv2d(prev_width, width, 1))
            fan_in = width + skip_width + (width if chained else 0)
            self.fuse.append(nn.Conv2d(fan_in, width, 1))
            self.blocks.append(nn.Sequential(
                *[DecoderBlock(cfg.block_config(width)) for _ in range(cfg.decoder_blocks_per_stage)]))
            prev_width = width
        # zero head: every sub-decoder starts as the identity restoration
        self.head = nn.Conv2d(dec[-1], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, enc: list[torch.Tensor], prev: Optional[list[torch.Tensor]] = None):
        if self.chained != (prev is not None):
            raise ConfigError("chained sub-decoder needs the previous decoder features")
        x = enc[-1]
        feats = []
        for k in range(DECODER_STAGES):
            x = self.up[k](F.interpolate(x, scale_factor=2, mode="nearest"))
            parts = [x, enc[DECODER_STAGES - 1 - k]]
            if prev is not None:
                parts.append(prev[k])
            x = self.blocks[k](self.fuse[k](torch.cat(parts, dim=1)))
            feats.append(x)
        return feats, self.head(x)


class MBMamba(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.shallow = nn.Conv2d(3, self.cfg.base_width, 3, padding=1)
        self.encoder = Encoder(self.cfg)
        self.decoders = nn.ModuleList(
            SubDecoder(self.cfg, chained=i > 0) for i in range(self.cfg.n_subdecoders))
        if self.cfg.freeze_encoder:
            set_encoder_trainable(self, False)

    def encoder_parameters(self):
        yield from self.shallow.parameters()
        yield from self.encoder.parameters()

    def forward(self, img: torch.Tensor) -> RestoredOutputs:
        return model_forward(img, self)


def shallow_extract(img: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    h, w = img.shape[-2:]
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ConfigError(f"spatial dims must be >= 16 and divisible by 16, got {h}x{w}")
    return conv(img)


def encoder_forward(feat: torch.Tensor, encoder: Encoder) -> list[torch.Tensor]:
    return encoder(feat)


def subdecoder_forward(enc, prev, decoder: SubDecoder):
    return decoder(enc, prev)


def model_forward(img: torch.Tensor, model: MBMamba) -> RestoredOutputs:
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    if img.dim() != 4 or img.shape[1] != 3:
        raise ConfigError(f"expected a 3-channel image, got {tuple(img.shape)}")
    enc = encoder_forward(shallow_extract(img, model.shallow), model.encoder)
    residuals, restored, features = [], [], []
    prev = None
    for dec in model.decoders:
        prev, res = subdecoder_forward(enc, prev, dec)
        residuals.append(res)
        restored.append(res + img)
        features.append(prev)
    if squeeze:
        residuals = [r[0] for r in residuals]
        restored = [r[0] for r in restored]
    return RestoredOutputs(residuals, restored, features)


def set_encoder_trainable(model: MBMamba, trainable: bool) -> MBMamba:
    for p in model.encoder_parameters():
        p.requires_grad_(trainable)
    model.cfg.freeze_encoder = not trainable
    return model


def freeze_encoder(model: MBMamba, checkpoint: str | Path | None = None) -> MBMamba:
    """Optionally load the front end (shallow conv + encoder) from a checkpoint, then freeze it."""
    if checkpoint is not None:
        from .checkpoint import load_checkpoint

        path = Path(checkpoint)
        if not path.is_file():
            raise ConfigError(f"encoder checkpoint not found: {path}")
        state = load_checkpoint(path).params
        own = model.state_dict()
        front = {k: v for k, v in state.items()
                 if k.startswith(("shallow.", "encoder.")) and k in own}
        if not front:
            raise ConfigError(f"no encoder parameters in {path}")
        model.load_state_dict(front, strict=False)
    return set_encoder_trainable(model, False)


def unfreeze_encoder(model: MBMamba) -> MBMamba:
    return set_encoder_trainable(model, True)
