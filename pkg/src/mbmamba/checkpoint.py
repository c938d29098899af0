"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (no pickled objects):

* ``__meta__``            uint8 array holding UTF-8 JSON: ``{"format": "mbmamba-ckpt",
                          "version": 1, "step": int, "model": {...}, "train": {...}}``
* ``param/<name>``        model parameters, keyed by ``state_dict`` name
* ``adam_m/<name>``       Adam first moments (optional)
* ``adam_v/<name>``       Adam second moments (optional)

Arrays keep the dtype they were trained in.  Readers must ignore unknown keys.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

FORMAT = "mbmamba-ckpt"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    step: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    adam_m: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: dict[str, torch.Tensor] = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT, "version": VERSION, "step": ckpt.step,
            "model": ckpt.model, "train": ckpt.train}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for prefix, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, t in group.items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    # write-then-rename so an interrupted save never clobbers the last good file
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(data["__meta__"].tobytes().decode())
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"malformed checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version", 0) > VERSION:
        raise ConfigError(f"unsupported checkpoint format in {path}: {meta.get('format')} "
                          f"v{meta.get('version')}")
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key in data.files:
        prefix, _, name = key.partition("/")
        if prefix in groups:
            groups[prefix][name] = torch.from_numpy(data[key].copy())
    return Checkpoint(groups["param"], int(meta.get("step", 0)), meta.get("model", {}),
                      meta.get("train", {}), groups["adam_m"], groups["adam_v"])
