"""Shared builders for small test problems."""

import numpy as np

from gpeopt.fem import build_space
from gpeopt.manifold import retract
from gpeopt.model import PotentialSpec, ProblemSpec
from gpeopt.operators import Discretization


def smooth_potential(harmonic=1.0, lattice=4.0):
    return PotentialSpec(kind="expression", harmonic=harmonic, lattice_amplitude=lattice)


def make_problem(p=2, coupling=1.0, diag=2.0, bc="natural", domain=(-4.0, 4.0)):
    """Small 1D coupled problem with a smooth confining potential."""
    K = np.full((p, p), float(coupling))
    np.fill_diagonal(K, diag)
    masses = tuple(1.0 / (j + 1) for j in range(p))
    return ProblemSpec(
        domain=domain,
        masses=masses,
        interaction=K,
        potentials=tuple(smooth_potential() for _ in range(p)),
        bc=bc,
    )


def make_disc(p=2, h=0.5, bc="natural", **kwargs):
    problem = make_problem(p=p, bc=bc, **kwargs)
    space = build_space(problem.domain, h, bc=bc)
    return Discretization(problem, space)


def random_feasible(disc, seed=0):
    rng = np.random.default_rng(seed)
    Phi = rng.standard_normal((disc.n, disc.p))
    return retract(Phi, disc.M, disc.masses)


def random_tangent(disc, Phi, seed=1):
    from gpeopt.manifold import project_tangent_l2

    rng = np.random.default_rng(seed)
    U = rng.standard_normal(Phi.shape)
    return project_tangent_l2(Phi, disc.M, disc.masses, U)
