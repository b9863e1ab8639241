"""Checks of the independent verification paths themselves.

The dense oracles are only trustworthy if they agree with closed-form facts
and with each other, so this module pins them down on problems where exact
statements exist: polynomial potentials (both quadrature rules integrate the
energy density exactly), decoupled systems, and the pure Laplacian
eigenproblem.
"""

import numpy as np
import pytest

from conftest import make_disc, random_feasible, smooth_potential
from gpeopt.fem import build_space
from gpeopt.manifold import MetricKind, retract
from gpeopt.model import PotentialSpec, ProblemSpec
from gpeopt.operators import Discretization
from gpeopt.oracles import (
    OracleError,
    dense_ground_state,
    dense_quadrature_energy,
    fd_gradient_check,
    local_rate_oracle,
)


def polynomial_problem(p=2, coupling=1.0, diag=2.0, bc="natural", domain=(-2.0, 2.0)):
    """Problem whose energy density both quadrature rules integrate exactly."""
    K = np.full((p, p), float(coupling))
    np.fill_diagonal(K, diag)
    return ProblemSpec(
        domain=domain,
        masses=tuple(1.0 / (j + 1) for j in range(p)),
        interaction=K,
        potentials=tuple(
            smooth_potential(harmonic=1.0 + j, lattice=0.0) for j in range(p)
        ),
        bc=bc,
    )


def polynomial_disc(p=2, h=0.5, bc="natural", **kwargs):
    problem = polynomial_problem(p=p, bc=bc, **kwargs)
    space = build_space(problem.domain, h, bc=bc)
    return Discretization(problem, space)


# ------------------------------------------------------------ energy oracle
def test_dense_energy_matches_production_on_polynomial_problem():
    disc = polynomial_disc(p=2, h=0.25)
    Phi = random_feasible(disc, seed=3)
    ours = disc.energy(Phi)
    ref = dense_quadrature_energy(disc.problem, disc.space, Phi)
    assert abs(ours - ref) <= 1e-12 * abs(ref)


def test_dense_energy_matches_production_with_dirichlet():
    disc = polynomial_disc(p=2, h=0.25, bc="dirichlet")
    Phi = random_feasible(disc, seed=4)
    ours = disc.energy(Phi)
    ref = dense_quadrature_energy(disc.problem, disc.space, Phi)
    assert abs(ours - ref) <= 1e-12 * abs(ref)


def test_dense_energy_oversample_invariance():
    disc = polynomial_disc(p=2, h=0.5)
    Phi = random_feasible(disc, seed=5)
    e3 = dense_quadrature_energy(disc.problem, disc.space, Phi, oversample=3)
    e5 = dense_quadrature_energy(disc.problem, disc.space, Phi, oversample=5)
    assert abs(e3 - e5) <= 1e-13 * max(1.0, abs(e3))


def test_dense_energy_piecewise_potential():
    # Cells aligned with elements keep both rules exact for the step potential.
    problem = ProblemSpec(
        domain=(0.0, 1.0),
        masses=(1.0,),
        interaction=np.array([[2.0]]),
        potentials=(
            PotentialSpec(kind="piecewise_random", cell_size=0.25, value_high=7.0,
                          probability=0.5, seed=11),
        ),
    )
    space = build_space(problem.domain, 0.125)
    disc = Discretization(problem, space)
    Phi = random_feasible(disc, seed=6)
    ours = disc.energy(Phi)
    ref = dense_quadrature_energy(disc.problem, disc.space, Phi)
    assert abs(ours - ref) <= 1e-12 * max(1.0, abs(ref))


def test_dense_energy_refuses_large_mesh():
    disc = polynomial_disc(p=1, h=2.0 ** -8)
    Phi = random_feasible(disc, seed=0)
    with pytest.raises(OracleError, match="refuses"):
        dense_quadrature_energy(disc.problem, disc.space, Phi)


# ------------------------------------------------- finite-difference gradients
@pytest.mark.parametrize("metric", [MetricKind.l2(), MetricKind.energy_adaptive()])
def test_fd_gradient_random_state(metric):
    disc = make_disc(p=2, h=0.25)
    Phi = random_feasible(disc, seed=7)
    report = fd_gradient_check(disc, Phi, metric, trials=4, seed=1)
    assert report.worst_errors[1] <= 1e-6
    assert 1.8 <= report.order <= 2.2


def test_fd_gradient_lagrangian_near_minimizer():
    # The Lagrangian-style metric is only guaranteed positive near minimizers,
    # so this check perturbs the dense reference state instead of drawing a
    # random one.
    disc = polynomial_disc(p=2, h=0.5)
    ref = dense_ground_state(disc.problem, disc.space, tol=1e-11)
    rng = np.random.default_rng(2)
    Phi = retract(ref.Phi + 0.05 * rng.standard_normal(ref.Phi.shape),
                  disc.M, disc.masses)
    report = fd_gradient_check(disc, Phi, MetricKind.lagrangian(0.9), trials=4, seed=2)
    assert report.worst_errors[1] <= 1e-6
    assert 1.8 <= report.order <= 2.2


# ------------------------------------------------------------ dense ground state
def test_dense_ground_state_laplacian_eigenpair():
    # Nearly decoupled single component, zero potential, Dirichlet box: the
    # solver must reproduce the lowest Laplacian eigenpair, sigma ~ pi^2.
    problem = ProblemSpec(
        domain=(0.0, 1.0),
        masses=(1.0,),
        interaction=np.array([[1e-30]]),
        potentials=(PotentialSpec(kind="expression", harmonic=0.0),),
        bc="dirichlet",
    )
    space = build_space(problem.domain, 0.125, bc="dirichlet")
    out = dense_ground_state(problem, space)
    assert out.residual < 1e-13
    assert abs(out.sigma[0] - np.pi**2) < 1e-2
    assert abs(out.energy - 0.5 * out.sigma[0]) < 1e-12 * out.sigma[0]
    # entrywise-nonnegative representative of the sine-like mode
    assert out.Phi.min() > -1e-12


def test_dense_ground_state_decoupled_components_match_scalar_runs():
    domain = (-2.0, 2.0)
    K = np.diag([2.0, 3.0])
    joint = ProblemSpec(
        domain=domain,
        masses=(1.0, 0.5),
        interaction=K,
        potentials=(smooth_potential(1.0, 0.0), smooth_potential(2.0, 0.0)),
    )
    space = build_space(domain, 0.5)
    out = dense_ground_state(joint, space, tol=1e-12)
    for j in range(2):
        single = ProblemSpec(
            domain=domain,
            masses=(joint.masses[j],),
            interaction=np.array([[K[j, j]]]),
            potentials=(joint.potentials[j],),
        )
        ref = dense_ground_state(single, space, tol=1e-12)
        assert np.max(np.abs(out.Phi[:, j] - ref.Phi[:, 0])) < 1e-9
        assert abs(out.sigma[j] - ref.sigma[0]) < 1e-9 * max(1.0, abs(ref.sigma[0]))


def test_dense_ground_state_satisfies_production_residual():
    disc = polynomial_disc(p=2, h=0.5)
    out = dense_ground_state(disc.problem, disc.space)
    parts = disc.assemble_hamiltonian(out.Phi)
    resid = disc.residual(out.Phi, parts)
    res, _ = disc.residual_norms(resid.R)
    assert res < 1e-11
    ours = disc.energy(out.Phi)
    assert abs(ours - out.energy) <= 1e-12 * max(1.0, abs(out.energy))


def test_dense_ground_state_energy_is_minimal():
    disc = polynomial_disc(p=2, h=0.5)
    out = dense_ground_state(disc.problem, disc.space, tol=1e-11)
    for seed in range(10):
        Phi = random_feasible(disc, seed=seed)
        assert disc.energy(Phi) > out.energy


def test_dense_ground_state_refuses_large_mesh():
    problem = polynomial_problem(p=1)
    space = build_space(problem.domain, 2.0 ** -8)
    with pytest.raises(OracleError, match="refuses"):
        dense_ground_state(problem, space)


# ----------------------------------------------------------------- local rate
def test_local_rate_refuses_unconverged_state():
    disc = polynomial_disc(p=1, h=0.5)
    Phi = random_feasible(disc, seed=9)
    with pytest.raises(OracleError, match="not converged"):
        local_rate_oracle(disc, Phi, tau=0.5)


def test_local_rate_predicts_observed_contraction():
    from gpeopt.oracles import _earg_step

    disc = polynomial_disc(p=1, h=0.25, domain=(-2.0, 2.0))
    out = dense_ground_state(disc.problem, disc.space)
    est = local_rate_oracle(disc, out.Phi, tau=0.5)
    assert est.max_imag <= 1e-9
    assert est.mu.max() < 1.0
    assert est.mu.min() > -2.0
    assert 0.0 < est.rho < 1.0

    # Iterate the actual map from a perturbed state and compare the observed
    # asymptotic M-norm contraction factor against the spectral prediction.
    rng = np.random.default_rng(3)
    X = retract(out.Phi + 1e-3 * rng.standard_normal(out.Phi.shape),
                disc.M, disc.masses)
    errs = []
    for _ in range(60):
        X = _earg_step(disc, X, 0.5)
        diff = X - out.Phi
        err = np.sqrt(np.einsum("ij,ij->", diff, disc.M @ diff))
        errs.append(err)
        if err < 1e-11:
            break
    ratios = [errs[k + 1] / errs[k] for k in range(len(errs) - 1) if errs[k] > 1e-10]
    observed = ratios[-1]
    assert abs(observed - est.rho) <= 0.05 * est.rho
