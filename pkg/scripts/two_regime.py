"""Stage 1: train encoder + decoder.  Stage 2: freeze the encoder, train a fresh decoder.

    python scripts/two_regime.py --out runs/two_regime [--stage1 ckpt.npz]

Without ``--stage1`` a stage-1 run is trained first on the 8-pair smoke set.
"""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from mbmamba.data import generate_dataset
from mbmamba.experiments import make_smoke_data, toy_config, two_regime
from mbmamba.train import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/two_regime")
    p.add_argument("--stage1", help="existing stage-1 checkpoint")
    p.add_argument("--stage1-iters", type=int, default=2000)
    p.add_argument("--stage2-iters", type=int, default=400)
    p.add_argument("--n-train", type=int, default=32)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)

    stage1 = args.stage1
    if stage1 is None:
        manifest = make_smoke_data(out / "stage1_data")
        cfg = TrainConfig(manifest=str(manifest), out_dir=str(out / "stage1"),
                          total_iters=args.stage1_iters, model=toy_config())
        train(cfg)
        stage1 = str(out / "stage1" / "checkpoint.npz")

    data = out / "stage2_data"
    if not (data / "manifest.jsonl").is_file():
        generate_dataset(data, n_train=args.n_train, n_val=8, size=64, seed=2)
    res = two_regime(stage1, data / "manifest.jsonl", out / "stage2", iters=args.stage2_iters)
    print(json.dumps({**asdict(res), "improvement_db": res.improvement}, indent=2))


if __name__ == "__main__":
    main()
