#!/usr/bin/env python3
"""Method comparison on the two-component interval benchmark.

For each requested interaction scale ``beta`` the script solves the same
trapped two-component problem (mesh width 2**-5, 2049 quadratic nodes)
with the four production methods — alternating energy-adaptive descent,
alternating Lagrangian-metric descent, Newton, regularized Newton — from
one shared initialization, and prints a comparison table with iteration
counts, matvecs per iteration, CPU seconds, final energy, and residual.

Expected behavior: the plain Newton method only converges at beta=10; at
beta=100 and beta=1000 its second-order system turns indefinite from the
standard initialization and the run stops early, while the regularized
variant stays within tens of iterations.  The exit status is 2 when any
cell did not converge, so the beta=100 and beta=1000 tables exit with 2
by design.

Usage:
    python scripts/interval_suite.py                  # beta = 10, 100, 1000
    python scripts/interval_suite.py --beta 10
    python scripts/interval_suite.py --beta 100 --tol 1e-10
"""

from __future__ import annotations

import argparse

from gpeopt.cli import _SUITES, bundled_config, compare, parse_config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="four-method comparison on the interval benchmark")
    parser.add_argument("--beta", type=int, action="append",
                        choices=(10, 100, 1000),
                        help="interaction scale to run (repeatable; default: all)")
    parser.add_argument("--tol", type=float, default=None,
                        help="override the outer residual tolerance")
    parser.add_argument("--tau", type=float, default=None,
                        help="override the descent step size")
    args = parser.parse_args(argv)

    status = 0
    for beta in args.beta or (10, 100, 1000):
        print(f"=== interval benchmark, beta = {beta} ===")
        overrides = {"tol": args.tol, "tau": args.tau}
        configs = [parse_config(bundled_config(name), overrides)
                   for name in _SUITES[f"1d-beta{beta}"]]
        status = max(status, compare(configs))
        print()
    return status


if __name__ == "__main__":
    raise SystemExit(main())
