#!/usr/bin/env python3
"""Sweep domain-B appearance and report source-only transfer per seed.

Each variant is a JSON dict of GenSpec overrides. The useful regime has a
large A->B drop and low seed-to-seed variance in the source-only and
symmetric rows, so that the adaptation rows have room to show gains.

    python scripts/calibrate_domain_b.py WORK '{}' '{"b_lesion_level": [0.45, 0.6]}'
"""

import argparse
import json
from pathlib import Path

from ds2net.synthdata import GenSpec, make_split
from ds2net.trainer import RunConfig, default_ladder, train

ROWS = {cfg.name: cfg for cfg in default_ladder()}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("work")
    ap.add_argument("variants", nargs="+")
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--rows", default="w/o-DA,+Symmetric")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    work = Path(args.work)
    t = args.iterations
    for v, text in enumerate(args.variants):
        spec = GenSpec.from_dict(json.loads(text))
        data = work / f"v{v}" / "data"
        make_split(spec, 200, 50, 200, 50, 0, data, force=True)
        for name in args.rows.split(","):
            scores = []
            for seed in (int(s) for s in args.seeds.split(",")):
                cfg = ROWS[name].replace(iterations=t, eval_interval=t, checkpoint_interval=t, seed=seed)
                res = train(cfg, data, work / f"v{v}" / f"{name.strip('+/')}-{seed}")
                scores.append(res.final["B/test"].iou_lesion)
            print(f"v{v} {name:12s} " + " ".join(f"{s:.4f}" for s in scores) + f"  mean {sum(scores) / len(scores):.4f}", flush=True)


if __name__ == "__main__":
    main()
