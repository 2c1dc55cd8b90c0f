"""Command line entry point: ``ssmatch {solve,gpg,simulate,diagnose,fit}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .harness import PRESETS, ExperimentConfig, diagnostics, regret_growth_fit, run_experiment
from .instance import load_instance, require_valid
from .spp import SppError, check_gpg, estimate_epsilon0, solve_spp
from .trace import Trace


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(",", " ").split()]


def _rates(args, rates):
    if args.lam is not None:
        return np.array(_floats(args.lam))
    if rates is None:
        raise SystemExit("instance file has no 'lambda'; pass --lambda")
    return rates.lam


def cmd_solve(args) -> int:
    inst, rates = load_instance(args.instance)
    require_valid(inst)
    sol = solve_spp(inst, _rates(args, rates))
    print(json.dumps({
        "x_star": [float(x) for x in sol.x_star],
        "basis": list(sol.basis),
        "alpha_star": [float(a) for a in sol.alpha_star],
        "opt_value": sol.opt_value,
    }, indent=2))
    return 0


def cmd_gpg(args) -> int:
    inst, rates = load_instance(args.instance)
    require_valid(inst)
    lam = _rates(args, rates)
    sol = solve_spp(inst, lam)
    eps = args.epsilon if args.epsilon is not None else estimate_epsilon0(inst, lam, sol)
    rep = check_gpg(inst, lam, eps, sol)
    print(json.dumps({
        "epsilon": eps,
        "holds": rep.holds,
        "epsilon_hat": rep.epsilon_hat,
        "failing_direction": rep.failing_direction,
    }, indent=2))
    return 0 if rep.holds else 1


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig(
        preset=args.preset,
        instance_path=args.instance,
        process=args.process,
        gamma=args.gamma,
        policies=args.policy.split(",") if args.policy else None,
        horizon=args.horizon,
        seeds=[int(s) for s in args.seeds.split(",")],
        record_every=args.record_every,
        out_dir=args.out,
    )
    res = run_experiment(cfg)
    for p, sm in res.summaries.items():
        last = sm.data[-1]
        print(f"{p}: t={int(last[0])} mean_regret={last[1]:.6g} mean_waste={last[3]:.6g}")
    for f in res.files:
        print(f)
    return 0


def cmd_diagnose(args) -> int:
    rep = diagnostics(Trace.from_csv(args.trace))
    print("\n".join(rep.lines()))
    return 0 if rep.ok else 1


def cmd_fit(args) -> int:
    fit = regret_growth_fit(Trace.from_csv(args.summary))
    print(json.dumps({
        "slope_vs_logt": fit.slope_vs_logt,
        "r_squared": fit.r_squared,
        "slope_vs_t": fit.slope_vs_t,
        "r_squared_t": fit.r_squared_t,
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssmatch", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the static planning LP")
    p.add_argument("instance")
    p.add_argument("--lambda", dest="lam")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gpg", help="check the general position gap")
    p.add_argument("instance")
    p.add_argument("--lambda", dest="lam")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_gpg)

    p = sub.add_parser("simulate", help="run an experiment")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--instance")
    p.add_argument("--process", default="iid", choices=("iid", "emulated", "permuted"))
    p.add_argument("--gamma", type=int, default=0)
    p.add_argument("--policy", help="comma separated: ss, greedy, dp, csirik, csirik_nodead")
    p.add_argument("--horizon", type=int, default=100_000)
    p.add_argument("--seeds", default="0")
    p.add_argument("--record-every", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="check sample-path properties of a trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("fit", help="regret growth fits of a summary file")
    p.add_argument("summary")
    p.set_defaults(func=cmd_fit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SppError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
