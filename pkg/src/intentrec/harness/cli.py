"""Command line entry point: ``intentrec {generate,train,analyze,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from ..numerics import NonFiniteError
from . import runner
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.variant is not None:
        run["variant"] = args.variant
    return cfg.replace(run=run) if run else cfg


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    users = runner.generate(cfg, args.out)
    print(f"wrote {len(users)} users x {cfg.sim.traj_len} events to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    start = time.perf_counter()
    try:
        state = runner.train(cfg, args.data, args.out, resume=args.resume)
    except runner.TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"trained {state.step} steps in {time.perf_counter() - start:.1f}s; outputs in {args.out}")
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    print(f"held-out next-item log-likelihood {summary['heldout_next_item_ll']:.4f}")
    return 0


def cmd_analyze(args) -> int:
    out = runner.analyze(args.checkpoints, args.data, args.out)
    last = max(r["training_step"] for r in out.surprise)
    for row in out.surprise:
        if row["training_step"] == last:
            print(f"step {last} {row['cohort']:>17}: mean KL {row['mean_kl']} (n={row['count']})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    start = time.perf_counter()
    report = runner.gradcheck(cfg, corrupt=args.inject_fault)
    tol = cfg.gradcheck.tolerance
    width = max(len(k) for k in report)
    for name, err in report.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    worst = max(report.values())
    ok = worst < tol
    print(f"max relative error {worst:.3e} (tolerance {tol:g}) over {len(report)} tensors "
          f"in {time.perf_counter() - start:.1f}s: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intentrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        p.add_argument("--config", help="INI run config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--variant", choices=("control", "experiment"), help="override run.variant")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="simulate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the joint model")
    common(p, data=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="surprise and probe reports over checkpoints")
    p.add_argument("--checkpoints", required=True, help="directory written by train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter tensor")
    common(p, out=False)
    p.add_argument("--inject-fault", type=float, default=0.0, metavar="SCALE",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ValueError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
