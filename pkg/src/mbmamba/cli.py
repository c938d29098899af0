"""Command line entry point: ``mbmamba {gen-data,train,eval,gradcheck,channel-report}``.

Exit codes: 0 success, 1 validation / I/O error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, NumericError

log = logging.getLogger("mbmamba")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-7`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"))


def _set_dotted(d: dict, key: str, value):
    *path, leaf = key.split(".")
    for p in path:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    d[leaf] = value


def load_train_config(path: str | None, overrides: list[str]):
    from .train import TrainConfig

    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.load(p.read_text(), Loader=_Loader) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        _set_dotted(raw, key.strip(), yaml.load(value, Loader=_Loader))
    return TrainConfig.from_dict(raw)


def cmd_gen_data(args):
    from .data import generate_dataset

    m = generate_dataset(args.out, args.n_train, args.n_val, args.size, args.seed,
                         args.noise, args.format)
    print(f"wrote {len(m.records)} pairs to {Path(args.out) / 'manifest.jsonl'}")


def cmd_train(args):
    from .train import train

    overrides = list(args.set or [])
    for flag, key in (("iters", "total_iters"), ("out", "out_dir"), ("manifest", "manifest"),
                      ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    cfg = load_train_config(args.config, overrides)
    runlog = train(cfg, resume=args.resume)
    print(json.dumps({"steps": len(runlog.records), "final": runlog.final}, indent=2))


def cmd_eval(args):
    from .train import evaluate

    metrics = evaluate(args.checkpoint, args.manifest, args.split)
    print(json.dumps(metrics, indent=2))


def cmd_gradcheck(args):
    from .gradcheck import COMPONENTS, run_gradcheck

    components = COMPONENTS if args.component == "all" else [args.component]
    ok = True
    for c in components:
        rep = run_gradcheck(c, args.seed)
        print(rep.summary())
        ok &= rep.passed
    if not ok:
        raise NumericError("gradient check failed")


def cmd_channel_report(args):
    from .data import load_manifest
    from .report import channel_activation_report
    from .train import _pad16, model_from_checkpoint

    import torch

    model, _ = model_from_checkpoint(args.checkpoint)
    pairs = load_manifest(args.manifest).load_pairs(args.split)[: args.n_probes]
    if not pairs:
        raise ConfigError("no probe images")
    probes = torch.cat([_pad16(torch.from_numpy(np.ascontiguousarray(b))[None])[0]
                        for _, b in pairs])
    rep = channel_activation_report(model, probes, args.block, args.threshold)
    rep.to_csv(args.out)
    print(json.dumps({"block": rep.block, "channels": len(rep.activations),
                      "dead_channels": rep.dead_count, "threshold": rep.threshold,
                      "csv": str(args.out)}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbmamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic blur dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=32)
    g.add_argument("--n-val", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--format", choices=("png", "ppm"), default="png")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (or resume) a model")
    t.add_argument("--config", help="YAML file with TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, dotted for nesting (model.chunks=2)")
    t.add_argument("--iters", type=int)
    t.add_argument("--out")
    t.add_argument("--manifest")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="val")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--component", default="all",
                   choices=("all", "losses", "mamba", "fcam", "memvssm", "decoder_block", "end_to_end"))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("channel-report", help="ReLU + GAP channel activations of a MemVSSM block")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--split", default="val")
    r.add_argument("--n-probes", type=int, default=8)
    r.add_argument("--block", help="module id, e.g. decoders.0.blocks.3.1.memvssm")
    r.add_argument("--threshold", type=float, default=1e-3)
    r.add_argument("--out", default="channel_report.csv")
    r.set_defaults(func=cmd_channel_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
