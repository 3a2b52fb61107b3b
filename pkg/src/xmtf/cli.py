"""Command-line entry point: ``xmtf <verb> [flags]``.

Exit codes: 0 success, 2 bad config or arguments, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import experiments as ex
from .calibrate import base_rate_report, tradeoff_report
from .env import SessionEnv
from .exceptions import ContractViolation, XmtfError
from .sprecher import DECOMPOSITIONS, verify_representation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
VERBS = ("train", "eval", "compare", "sweep-lambda", "dump-mfc-curves", "calibrate-env",
         "verify-sprecher")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser():
    p = _Parser(prog="xmtf", description="Multi-task fusion experiments on a simulated "
                "short-video platform.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    def common(sp, trials=True):
        sp.add_argument("--config", help="JSON config; missing keys take defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="runs/out", help="output directory")
        if trials:
            sp.add_argument("--trials", type=int, default=None, help="default: config (20)")
            sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train one method for several trials")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from saved checkpoints")
    sp = sub.add_parser("eval", help="re-evaluate the checkpoints of a train run")
    common(sp, trials=False)
    sp.add_argument("--users", type=int, default=None)
    sp = sub.add_parser("compare", help="CEM, formula-RL, xMTF and its ablations")
    common(sp)
    sp.add_argument("--methods", help="comma-separated subset of " + ",".join(ex.COMPARE_METHODS))
    sp.add_argument("--cache", help="directory of per-trial results to reuse")
    sp = sub.add_parser("sweep-lambda", help="xMTF over several inner-loss weights")
    common(sp)
    sp.add_argument("--lambdas", help="comma-separated values in [0, 1]")
    sp.add_argument("--cache", help="directory of per-trial results to reuse")
    sp = sub.add_parser("dump-mfc-curves", help="inner-cell curves of a train run as CSV")
    common(sp, trials=False)
    sp.add_argument("--run", help="train run directory (default: --out)")
    sp.add_argument("--users", type=int, default=5)
    sp.add_argument("--points", type=int, default=21)
    sp = sub.add_parser("calibrate-env", help="session trade-off and base-rate report")
    common(sp, trials=False)
    sp.add_argument("--users", type=int, default=500)
    sp = sub.add_parser("verify-sprecher", help="check the formula decompositions numerically")
    common(sp, trials=False)
    sp.add_argument("--samples", type=int, default=1000)
    return p


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ContractViolation(f"bad number list {text!r}") from exc


def _train(args, cfg):
    s = ex.run_experiment(cfg, args.out, args.seed, args.trials, args.workers, args.resume)
    print(json.dumps(s, sort_keys=True))
    return EXIT_OK if not s["failed_trials"] else EXIT_RUNTIME


def _eval(args, cfg):
    rows = ex.evaluate_run(args.out, args.users or cfg.eval_users)
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


def _compare(args, cfg):
    methods = None
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        bad = set(methods) - set(ex.COMPARE_METHODS)
        if bad:
            raise ContractViolation(f"unknown methods {sorted(bad)}")
    table = ex.compare(cfg, args.out, args.seed, args.trials, args.workers, methods,
                       args.cache)
    with open(os.path.join(args.out, "compare.csv")) as fh:
        print(fh.read(), end="")
    return EXIT_OK if all(v is not None for v in table.values()) else EXIT_RUNTIME


def _sweep(args, cfg):
    lambdas = _floats(args.lambdas) if args.lambdas else None
    table = ex.sweep_lambda(cfg, args.out, args.seed, args.trials, args.workers, lambdas,
                            args.cache)
    with open(os.path.join(args.out, "sweep.csv")) as fh:
        print(fh.read(), end="")
    return EXIT_OK if len(table) == len(lambdas or cfg.lambdas) else EXIT_RUNTIME


def _curves(args, cfg):
    run = args.run or args.out
    path = os.path.join(args.out, "mfc_curves.csv")
    os.makedirs(args.out, exist_ok=True)
    rows = ex.dump_mfc_curves(run, path, args.users, args.points)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def _calibrate(args, cfg):
    env = SessionEnv(cfg.env)
    report = {"tradeoff": tradeoff_report(env, args.users, args.seed),
              "base_rates": base_rate_report(env, seed=args.seed)}
    os.makedirs(args.out, exist_ok=True)
    ex.write_json(os.path.join(args.out, "calibration.json"), report)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["tradeoff"]["shortening"] >= 0.1 else EXIT_RUNTIME


def _sprecher(args, cfg):
    rng = np.random.default_rng(args.seed)
    rows, worst = [], 0.0
    for row in DECOMPOSITIONS:
        for K in range(2, 9):
            a = rng.uniform(0.1, 3.0, K)
            beta = rng.uniform(0.001, 0.1, K)
            err = verify_representation(row, a, beta, args.samples, rng)
            rows.append([row, K, repr(err)])
            worst = max(worst, err)
    os.makedirs(args.out, exist_ok=True)
    ex._write_csv(os.path.join(args.out, "sprecher.csv"), ["row", "K", "max_rel_err"], rows)
    print(f"max relative discrepancy {worst:.3e} over rows 1-3, K = 2..8")
    return EXIT_OK if worst <= 1e-9 else EXIT_RUNTIME


HANDLERS = {"train": _train, "eval": _eval, "compare": _compare, "sweep-lambda": _sweep,
            "dump-mfc-curves": _curves, "calibrate-env": _calibrate,
            "verify-sprecher": _sprecher}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "trials", None) is not None and args.trials < 1:
            raise ContractViolation("--trials must be at least 1")
        if getattr(args, "workers", 1) < 1:
            raise ContractViolation("--workers must be at least 1")
        cfg = ex.load_config(args.config)
        return HANDLERS[args.verb](args, cfg)
    except ContractViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (XmtfError, OSError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
