"""Canonical benchmark problems used by tests, scripts, and the CLI.

Two families:

* ``bench1d``: two components on [-16, 16] in a harmonic-plus-lattice trap
  with interaction strengths scaled by a single factor ``beta``; mesh width
  2^-5 gives 2049 nodes.
* ``bench2d``: three components on the unit square under a {0, 4096}-valued
  cell potential (checkerboard or seeded Bernoulli(1/2) arrangement, cell
  width 2^-6) plus a steep confining trap. The reference resolution is
  h = 2^-10; the reduced resolution 2^-6 keeps runs affordable.
"""

from __future__ import annotations

import numpy as np

from .fem import build_space
from .model import PotentialSpec, ProblemSpec
from .operators import Discretization

__all__ = [
    "BENCH1D_BETAS",
    "BENCH1D_H",
    "BENCH2D_CELL",
    "BENCH2D_REDUCED_H",
    "BENCH2D_SEED",
    "bench1d_disc",
    "bench1d_problem",
    "bench2d_disc",
    "bench2d_problem",
]

BENCH1D_BETAS = (10.0, 100.0, 1000.0)
BENCH1D_H = 2.0 ** -5
BENCH2D_CELL = 2.0 ** -6
BENCH2D_REDUCED_H = 2.0 ** -6
BENCH2D_FULL_H = 2.0 ** -10
BENCH2D_SEED = 1234


def bench1d_problem(beta: float) -> ProblemSpec:
    """Two-component interval benchmark at interaction scale ``beta``."""
    kappa = float(beta) * np.array([[2.08, 2.0], [2.0, 1.94]])
    trap = PotentialSpec(
        kind="expression", harmonic=1.0, lattice_amplitude=48.0, lattice_frequency=1.0
    )
    return ProblemSpec(
        domain=(-16.0, 16.0),
        masses=(0.8, 0.2),
        interaction=kappa,
        potentials=(trap, trap),
        bc="natural",
    )


def bench1d_disc(beta: float, h: float = BENCH1D_H) -> Discretization:
    problem = bench1d_problem(beta)
    return Discretization(problem, build_space(problem.domain, h))


def bench2d_problem(arrangement: str = "periodic",
                    seed: int = BENCH2D_SEED) -> ProblemSpec:
    """Three-component unit-square benchmark with a cell potential and trap."""
    if arrangement not in ("periodic", "random"):
        raise ValueError(f"arrangement must be 'periodic' or 'random', got {arrangement!r}")
    kappa = np.array([[0.5, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 10.0]])
    pot = PotentialSpec(
        kind="piecewise_periodic" if arrangement == "periodic" else "piecewise_random",
        cell_size=BENCH2D_CELL,
        value_high=2.0 ** 12,
        probability=0.5,
        seed=seed,
        trap_strength=1e6,
        trap_power=40,
    )
    return ProblemSpec(
        domain=((0.0, 1.0), (0.0, 1.0)),
        masses=(1.0, 1.0, 1.0),
        interaction=kappa,
        potentials=(pot, pot, pot),
        bc="natural",
    )


def bench2d_disc(arrangement: str = "periodic", h: float = BENCH2D_REDUCED_H,
                 seed: int = BENCH2D_SEED) -> Discretization:
    problem = bench2d_problem(arrangement, seed=seed)
    return Discretization(problem, build_space(problem.domain, h))
