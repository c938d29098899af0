"""Per-channel activation (ReLU + global average pooling) of MemVSSM outputs.

    python scripts/channel_redundancy.py --checkpoint runs/smoke/ising/checkpoint.npz \
        --manifest runs/smoke/data/manifest.jsonl --out runs/channels

Writes one CSV per MemVSSM block and prints the dead-channel counts.
"""
import argparse
import json

import numpy as np
import torch

from mbmamba.data import load_manifest
from mbmamba.report import channel_activation_report, probe_blocks
from mbmamba.train import model_from_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--n-probes", type=int, default=8)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--out", default="runs/channels")
    args = p.parse_args()

    model, _ = model_from_checkpoint(args.checkpoint)
    pairs = load_manifest(args.manifest).load_pairs(args.split)[: args.n_probes]
    probes = torch.from_numpy(np.stack([b for _, b in pairs]))
    summary = {}
    for block in probe_blocks(model):
        rep = channel_activation_report(model, probes, block, args.threshold)
        rep.to_csv(f"{args.out}/{block}.csv")
        summary[block] = {"channels": len(rep.activations), "dead": rep.dead_count,
                          "mean": float(rep.activations.mean())}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
