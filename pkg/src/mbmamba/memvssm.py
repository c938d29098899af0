"""Chunk-wise Mamba scanning with a FIFO memory bank and cross-attention fusion."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .ssm import SCAN_ORDERS, MambaBlock


@dataclass
class DecoderBlockConfig:
    channels: int
    chunks: int = 4
    bank_depth: int = 1
    state_dim: int = 8
    ffn_expansion: float = 2.0
    scan_order: str = "row_major"

    def __post_init__(self):
        if self.scan_order not in SCAN_ORDERS:
            raise ConfigError(f"scan_order must be one of {SCAN_ORDERS}, got {self.scan_order!r}")
        if self.chunks < 1 or self.bank_depth < 1:
            raise ConfigError("chunks and bank_depth must be >= 1")
        if self.channels % self.chunks:
            raise ConfigError(f"channels={self.channels} not divisible by chunks={self.chunks}")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")

    @property
    def chunk_channels(self) -> int:
        return self.channels // self.chunks


def chunk_split(F_: torch.Tensor, n: int) -> list[torch.Tensor]:
    """Split along the channel axis (dim -3) into ``n`` contiguous chunks."""
    c = F_.shape[-3]
    if n < 1 or c % n:
        raise ConfigError(f"cannot split {c} channels into {n} chunks")
    return list(torch.split(F_, c // n, dim=-3))


class MemoryBank:
    """Bounded FIFO of fused chunk features, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque = deque()

    def push(self, feat: torch.Tensor) -> "MemoryBank":
        if self._entries and feat.shape != self._entries[0].shape:
            raise ConfigError(
                f"bank entry shape {tuple(feat.shape)} != {tuple(self._entries[0].shape)}")
        self._entries.append(feat)
        if len(self._entries) > self.capacity:
            self._entries.popleft()
        return self

    def fetch(self) -> list[torch.Tensor]:
        return list(self._entries)

    def __len__(self):
        return len(self._entries)


def bank_update(bank: MemoryBank, feat: torch.Tensor) -> MemoryBank:
    return bank.push(feat)


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        y = F.layer_norm(x.permute(0, 2, 3, 1), x.shape[1:2], self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)


class GatedFFN(nn.Module):
    """Pointwise two-layer FFN with a simple multiplicative gate."""

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = max(1, int(round(channels * expansion)))
        self.fc1 = nn.Conv2d(channels, 2 * hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        a, b = self.fc1(x).chunk(2, dim=1)
        return self.fc2(a * b)


def channel_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(HW)) v over (B, c, HW) channel rows."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    return attn @ v


class FCAM(nn.Module):
    """Bidirectional channel cross-attention between a chunk and bank entries.

    For one history entry ``P``:

        q_cur  = proj_cur(norm_cur(F))    # query of F, key of P
        q_hist = proj_hist(norm_hist(P))  # query of P, key of F
        out = att(q_cur, q_hist, v_cur(F)) + att(q_hist, q_cur, v_hist(P)) + F + P

    Several entries contribute their attention terms and residual independently;
    ``F`` is added once.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm_cur = LayerNorm2d(channels)
        self.norm_hist = LayerNorm2d(channels)
        self.proj_cur = nn.Conv2d(channels, channels, 1)
        self.proj_hist = nn.Conv2d(channels, channels, 1)
        self.v_cur = nn.Conv2d(channels, channels, 1)
        self.v_hist = nn.Conv2d(channels, channels, 1)

    def pair(self, cur: torch.Tensor, hist: torch.Tensor) -> torch.Tensor:
        """Sum of the two attention terms for one (current, history) pair."""
        b, c, h, w = cur.shape
        q_cur = self.proj_cur(self.norm_cur(cur)).flatten(2)
        q_hist = self.proj_hist(self.norm_hist(hist)).flatten(2)
        v_cur = self.v_cur(cur).flatten(2)
        v_hist = self.v_hist(hist).flatten(2)
        att_fwd = channel_attention(q_cur, q_hist, v_cur)
        att_bwd = channel_attention(q_hist, q_cur, v_hist)
        return (att_fwd + att_bwd).reshape(b, c, h, w)

    def forward(self, cur: torch.Tensor, history: list[torch.Tensor]) -> torch.Tensor:
        out = cur
        for entry in history:
            if entry.shape != cur.shape:
                raise ConfigError(
                    f"history entry {tuple(entry.shape)} does not match chunk {tuple(cur.shape)}")
            out = out + self.pair(cur, entry) + entry
        return out


def fcam_fuse(cur: torch.Tensor, history: list[torch.Tensor], weights: FCAM) -> torch.Tensor:
    return weights(cur, history)


class MemVSSM(nn.Module):
    """Sequential chunk scan with memory-bank fusion; output channels = input channels.

    One Mamba branch and one FCAM are shared by all chunks.
    """

    def __init__(self, cfg: DecoderBlockConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.chunk_channels
        self.mamba = MambaBlock(c, cfg.state_dim, scan_order=cfg.scan_order)
        self.fcam = FCAM(c)

    def forward(self, x: torch.Tensor,
                on_chunk: Optional[Callable[[int, MemoryBank], None]] = None) -> torch.Tensor:
        bank = MemoryBank(self.cfg.bank_depth)
        fused = []
        for i, chunk in enumerate(chunk_split(x, self.cfg.chunks)):
            feat = self.mamba(chunk)
            feat = self.fcam(feat, bank.fetch())
            bank.push(feat)
            fused.append(feat)
            if on_chunk is not None:
                on_chunk(i, bank)
        return torch.cat(fused, dim=1)


def memvssm_forward(x: torch.Tensor, weights: MemVSSM) -> torch.Tensor:
    return weights(x)


class DecoderBlock(nn.Module):
    """x' = MemVSSM(FFN(Norm(x))) + x;  out = FFN(Norm(x')) + x'."""

    def __init__(self, cfg: DecoderBlockConfig):
        super().__init__()
        c = cfg.channels
        self.norm1 = LayerNorm2d(c)
        self.ffn1 = GatedFFN(c, cfg.ffn_expansion)
        self.memvssm = MemVSSM(cfg)
        self.norm2 = LayerNorm2d(c)
        self.ffn2 = GatedFFN(c, cfg.ffn_expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.memvssm.cfg.channels:
            raise ConfigError(f"decoder block expects {self.memvssm.cfg.channels} channels, "
                              f"got shape {tuple(x.shape)}")
        x = self.memvssm(self.ffn1(self.norm1(x))) + x
        return self.ffn2(self.norm2(x)) + x


def decoder_block(x: torch.Tensor, weights: DecoderBlock) -> torch.Tensor:
    return weights(x)
