"""ds2net command line: gen-data, train, eval, ablate, grad-check.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
Log verbosity comes from the DS2NET_LOG environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .diffcore import NumericError
from .synthdata import DataFormatError, GenSpec, GenerationError, make_split
from .trainer import (
    ConfigError,
    RunConfig,
    RunData,
    TrainState,
    default_ladder,
    evaluate_arrays,
    load_ladder,
    run_ablation,
    train,
)
from .metrics import iou, miou

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

DEFAULT_COUNTS = {"n_train_A": 200, "n_test_A": 50, "n_train_B": 200, "n_test_B": 50}

log = logging.getLogger("ds2net")


class UsageError(Exception):
    """Bad flag combination or guard violation; maps to the config exit code."""


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_gen_data(args) -> int:
    raw = _read_json(args.spec) if args.spec else {}
    counts = {k: int(raw.pop(k, v)) for k, v in DEFAULT_COUNTS.items()}
    try:
        spec = GenSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    try:
        entries = make_split(spec, master_seed=args.seed, out_dir=out, force=args.force, **counts)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    except GenerationError as exc:
        raise ConfigError(str(exc)) from exc
    _write_json(out / "gen_config.json", {**spec.to_dict(), **counts, "seed": args.seed})
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config)
    out = Path(args.out)
    ckpt = out / "checkpoint.bin"
    if ckpt.exists() and not (args.resume or args.force):
        raise UsageError(f"{out} already holds a run; pass --resume to continue or --force to restart")
    res = train(cfg, args.data, out, resume=args.resume, stop_at=args.stop_at)
    parts = [f"run={cfg.run_id}", f"config={cfg.config_hash}", f"iteration={res.state.iteration}"]
    for split, row in sorted(res.final.items()):
        parts.append(f"{split}:IoU={row.iou_lesion:.4f},mIoU={row.miou:.4f}")
    print(" ".join(parts))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = RunConfig.from_json(run / "config.json")
    state = TrainState.load(run / "checkpoint.bin", cfg)
    data = RunData.load(args.data, cfg)
    path = args.path or ("ensemble" if cfg.symmetric else "s")
    out = Path(args.out) if args.out else run
    results = {}
    for split, arr in sorted(data.tests.items()):
        c = evaluate_arrays(state.model, arr, path)
        results[split] = {"IoU_lesion": iou(c, 1), "IoU_background": iou(c, 0), "mIoU": miou(c)}
    _write_json(out / "eval_config.json", {"run": str(run), "data": str(args.data), "path": path, "config": cfg.to_dict()})
    _write_json(out / "eval.json", {"iteration": state.iteration, "path": path, "results": results})
    print(
        f"run={cfg.run_id} iteration={state.iteration} path={path} "
        + " ".join(f"{s}:IoU={r['IoU_lesion']:.4f},mIoU={r['mIoU']:.4f}" for s, r in results.items())
    )
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must list integers, got {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds must list distinct integers, got {text!r}")
    return seeds


def cmd_ablate(args) -> int:
    ladder = load_ladder(args.ladder) if args.ladder else default_ladder()
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    if (out / "ablation.csv").exists() and not args.force:
        raise UsageError(f"{out} already holds an ablation; pass --force to rerun")
    _write_json(out / "ladder.json", {"seeds": seeds, "rows": [c.to_dict() for c in ladder]})
    rows = run_ablation(ladder, args.data, seeds, out)
    print((out / "ablation.md").read_text(), end="")
    if not any(r.ok for r in rows):
        print("error: every ablation run failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import FAMILIES, TOLERANCE, run_suite

    families = args.family or list(FAMILIES)
    unknown = sorted(set(families) - set(FAMILIES))
    if unknown:
        raise ConfigError(f"unknown grad-check family: {', '.join(unknown)}")
    results = run_suite(args.seeds, families)
    if args.out:
        _write_json(Path(args.out) / "grad_check.json", {
            "seeds": args.seeds,
            "tolerance": TOLERANCE,
            "results": {r.family: r.worst for r in results},
        })
    for r in results:
        print(f"{r.family:16s} seeds={r.seeds} max_rel_err={r.worst:.3e} {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ds2net", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic two-domain dataset")
    g.add_argument("--spec", help="JSON generator spec (GenSpec fields plus optional split counts)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--force", action="store_true", help="discard an existing run in --out")
    t.add_argument("--stop-at", type=int, default=None, help="stop after this many iterations")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run on the test splits")
    e.add_argument("--run", required=True, help="run directory holding config.json and checkpoint.bin")
    e.add_argument("--data", required=True)
    e.add_argument("--path", choices=("s", "t", "ensemble"))
    e.add_argument("--out", help="where to write eval.json (default: the run directory)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation ladder over several seeds")
    a.add_argument("--ladder", help="JSON ladder file (default: the five-row ladder)")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("grad-check", help="run the gradient-check suites")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--family", action="append")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DS2NET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
