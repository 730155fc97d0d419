#!/usr/bin/env python3
"""Run the five-row ablation ladder over several seeds and check its ordering.

    python scripts/run_ladder.py DATA OUT --iterations 1000 --seeds 0,1,2
"""

import argparse
import logging
import time
from pathlib import Path

from ds2net.trainer import RunConfig, check_ladder, default_ladder, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("data")
    ap.add_argument("out")
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--lambda-adv", type=float, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    extra = {}
    if args.lambda_adv is not None:
        extra = dict(lambda_Es=args.lambda_adv, lambda_Et=args.lambda_adv)
    t = args.iterations
    base = RunConfig(iterations=t, eval_interval=t, checkpoint_interval=t, **extra)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.process_time()
    rows = run_ablation(default_ladder(base), args.data, seeds, args.out, force=True)
    checks, summary = check_ladder(rows, seeds)
    print((Path(args.out) / "ablation.md").read_text())
    print(summary, f"({(time.process_time() - t0) / 60:.1f} min cpu)")
    for name, ok in checks.items():
        print(f"  {'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    main()
