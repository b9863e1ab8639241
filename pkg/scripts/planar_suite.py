#!/usr/bin/env python3
"""Method comparison on the three-component unit-square benchmark.

The reduced default (mesh width 2**-6, 16641 quadratic nodes) runs in
seconds to minutes: the periodic cell arrangement is solved with all four
production methods from one shared initialization, and the seeded random
arrangement with alternating energy-adaptive descent.  All converging
methods should agree on the periodic energy to well below 1e-6 relative.

``--full`` refines the mesh to 2**-10.  That is a multi-hour run needing
tens of gigabytes of memory; at that resolution the periodic arrangement's
energy approaches 4582.2.  The random arrangement's energy depends on the
potential realization, so it has no fixed target — vary ``--seed`` to
sample realizations.

Usage:
    python scripts/planar_suite.py                    # both reduced cases
    python scripts/planar_suite.py --case periodic --methods rn,reg-rn
    python scripts/planar_suite.py --case random --seed 7
    python scripts/planar_suite.py --case periodic --full
"""

from __future__ import annotations

import argparse
import time

from gpeopt.benchmarks import BENCH2D_FULL_H, BENCH2D_REDUCED_H, BENCH2D_SEED, bench2d_disc
from gpeopt.optimizers import SolverOptions, alternating_rgd_run, initialize, newton_run

ALL_METHODS = ("ea-rgd", "lgr-rgd", "rn", "reg-rn")


def run_case(arrangement: str, methods: list[str], h: float, seed: int,
             tol: float) -> bool:
    disc = bench2d_disc(arrangement, h=h, seed=seed)
    print(f"=== planar benchmark, arrangement={arrangement} h={h:g} "
          f"nodes={disc.n} components={disc.p} tol={tol:g} ===")
    t0 = time.perf_counter()
    Phi0, sweeps = initialize(disc)
    print(f"initialization: {sweeps} sweeps, {time.perf_counter() - t0:.1f}s")
    print(f"{'method':<12} {'iters':>6} {'seconds':>8} {'energy':>18} {'residual':>10}")
    all_converged = True
    for method in methods:
        newton = method in ("rn", "reg-rn")
        options = SolverOptions(method=method, alternating=not newton,
                                tau=1.0, tol=tol,
                                max_outer=200 if newton else 20000)
        t0 = time.perf_counter()
        if newton:
            report = newton_run(disc, Phi0, options, init_sweeps=sweeps)
        else:
            report = alternating_rgd_run(disc, Phi0, options, init_sweeps=sweeps)
        seconds = time.perf_counter() - t0
        label = method + ("" if newton else " alt")
        if report.converged:
            print(f"{label:<12} {report.iterations:>6} {seconds:>8.1f} "
                  f"{report.energy:>18.10f} {report.residual:>10.3e}")
        else:
            all_converged = False
            print(f"{label:<12} {report.iterations:>6} {seconds:>8.1f} "
                  f"{'-':>18} {report.residual:>10.3e}  ({report.reason})")
    print()
    return all_converged


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="method comparison on the unit-square benchmark")
    parser.add_argument("--case", choices=("periodic", "random", "all"),
                        default="all")
    parser.add_argument("--methods", default=",".join(ALL_METHODS),
                        help="comma-separated methods for the periodic case "
                             "(the random case always uses ea-rgd)")
    parser.add_argument("--h", type=float, default=BENCH2D_REDUCED_H,
                        help="mesh width (default: the reduced resolution)")
    parser.add_argument("--full", action="store_true",
                        help=f"shorthand for --h {BENCH2D_FULL_H:g} "
                             "(hours of CPU and tens of GB of memory)")
    parser.add_argument("--seed", type=int, default=BENCH2D_SEED,
                        help="random-arrangement potential seed")
    parser.add_argument("--tol", type=float, default=1e-8)
    args = parser.parse_args(argv)

    h = BENCH2D_FULL_H if args.full else args.h
    if h < BENCH2D_REDUCED_H:
        print(f"note: mesh width {h:g} is finer than the reduced default "
              f"{BENCH2D_REDUCED_H:g}; expect a long run and a large "
              "memory footprint.\n")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        parser.error(f"unknown methods {unknown}; choose from {ALL_METHODS}")

    ok = True
    if args.case in ("periodic", "all"):
        ok &= run_case("periodic", methods, h, args.seed, args.tol)
    if args.case in ("random", "all"):
        ok &= run_case("random", ["ea-rgd"], h, args.seed, args.tol)
    return 0 if ok else 2


if __name__ == "__main__":
    raise SystemExit(main())
