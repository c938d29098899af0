"""Overfit the toy model on 8 synthetic pairs, with and without the Ising term.

    python scripts/overfit_smoke.py --out runs/smoke [--iters 2000]
"""
import argparse
import json
import logging

from mbmamba.experiments import overfit_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = overfit_smoke(args.out, iters=args.iters, batch_size=args.batch_size, seed=args.seed)
    print(json.dumps({
        "input_psnr": res.input_psnr,
        "psnr": res.psnr,
        "gain_db": {k: res.gain(k) for k in res.psnr},
        "ising_cost_db": res.ising_cost,
        "seconds": res.seconds,
    }, indent=2))


if __name__ == "__main__":
    main()
