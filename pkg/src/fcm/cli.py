"""Command line entry point.

``fcm run <scenario>`` drives one of the studies and writes CSV output,
slope fits and figures into the chosen directory.  With ``--assert`` the
exit code is nonzero when a scenario misses its expected scaling behavior.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from .experiments import (
    ScenarioConfig,
    run_manufactured,
    run_plate_hole,
    run_rotating_square,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fcm",
        description="Immersed finite cell studies with SIPIC preconditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("scenario",
                     choices=["rotating_square", "plate_hole", "manufactured"])
    run.add_argument("--basis", choices=["bspline", "lagrange"],
                     default="bspline")
    run.add_argument("--order", type=int, default=2, metavar="P")
    run.add_argument("--h", type=float, default=1.0 / 32.0)
    run.add_argument("--angles", type=int, default=100)
    run.add_argument("--angle-range", type=float, nargs=2, default=(0.0, 45.0))
    run.add_argument("--depth", type=int, default=None,
                     help="tessellation depth (default 2, plate 6)")
    run.add_argument("--gamma", type=float, default=0.9)
    run.add_argument("--eps", type=float, default=None)
    run.add_argument("--stab", choices=["local", "global"], default="local")
    run.add_argument("--precon", choices=["none", "scale", "sipic"],
                     default="sipic")
    run.add_argument("--levels", type=int, default=5)
    run.add_argument("--rel-tol", type=float, default=1e-6)
    run.add_argument("--rel-tol-sipic", type=float, default=1e-10)
    run.add_argument("--max-iter", type=int, default=100_000)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--solve", action="store_true",
                     help="also record CG iteration counts per angle")
    run.add_argument("--export-systems", action="store_true")
    run.add_argument("--no-figures", action="store_true")
    run.add_argument("--assert", dest="check", action="store_true",
                     help="exit nonzero when scaling expectations are missed")
    run.add_argument("--out", required=True)
    return parser


def _config(args):
    depth = args.depth
    if depth is None:
        depth = 6 if args.scenario == "plate_hole" else 2
    return ScenarioConfig(
        scenario=args.scenario,
        family=args.basis,
        p=args.order,
        h=args.h,
        depth=depth,
        n_angles=args.angles,
        angle_range=tuple(args.angle_range),
        gamma=args.gamma,
        eps=args.eps,
        stab_mode=args.stab,
        precon=args.precon,
        levels=args.levels,
        rel_tol=args.rel_tol,
        rel_tol_sipic=args.rel_tol_sipic,
        max_iter=args.max_iter,
        seed=args.seed,
        solve=args.solve,
        export_systems=args.export_systems,
        figures=not args.no_figures,
        out_dir=args.out,
    )


def _check_rotating(cfg, slopes):
    failures = []
    expected = -(2 * cfg.p + 1 - 1.0 / 2.0) if cfg.stab_mode == "global" else -2.0 * cfg.p
    tol = 1.0 if cfg.p == 4 else 0.5
    info = slopes.get("kappa_orig")
    if info is None:
        failures.append("kappa_orig slope not available")
    elif abs(info["slope"] - expected) > tol:
        failures.append(
            f"kappa_orig slope {info['slope']:.2f} outside {expected}+-{tol}"
        )
    if "sipic" in cfg.compute_kappa:
        info = slopes.get("kappa_sipic")
        if info is not None and abs(info["slope"]) > 0.3:
            failures.append(f"kappa_sipic slope {info['slope']:.2f} not flat")
    return failures


def _check_plate(records, slopes):
    failures = []
    info = slopes.get("kappa_sipic_vs_h")
    if info is None or abs(info["slope"] + 2.0) > 0.4:
        failures.append("kappa_sipic h-scaling outside -2 +- 0.4")
    rate = slopes.get("energy_rate_sipic")
    if rate is None or abs(rate - 4.0) > 0.6:
        failures.append(f"energy rate {rate} outside 4 +- 0.6")
    last = records[-1]
    if last.cg_iters_sipic * 10 > last.cg_iters_orig:
        failures.append("SIPIC CG iteration gain below 10x on the finest level")
    return failures


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    failures = []
    if args.scenario == "rotating_square":
        records, slopes = run_rotating_square(cfg)
        print(json.dumps(slopes, indent=2))
        if args.check:
            failures = _check_rotating(cfg, slopes)
    elif args.scenario == "plate_hole":
        records, slopes, _ = run_plate_hole(cfg)
        print(json.dumps(slopes, indent=2))
        if args.check:
            failures = _check_plate(records, slopes)
    else:
        levels, slopes = run_manufactured(cfg)
        print(json.dumps(slopes, indent=2))
        if args.check:
            rate = slopes["energy_rate"]
            if not math.isfinite(rate) or rate < cfg.p - 0.4:
                failures = [f"energy rate {rate:.2f} below order {cfg.p}"]
    for line in failures:
        print(f"ASSERTION FAILED: {line}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
