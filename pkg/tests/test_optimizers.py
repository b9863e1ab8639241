"""Outer iterations: options, stopping, initialization, descent runs, Newton runs."""

import numpy as np
import pytest
from conftest import make_disc, random_feasible
from numpy.testing import assert_allclose

from gpeopt.benchmarks import bench1d_problem
from gpeopt.fem import build_space
from gpeopt.linalg import MatvecCounter
from gpeopt.manifold import feasibility_error, retract
from gpeopt.operators import Discretization
from gpeopt.optimizers import (
    INIT_INNER_FACTOR,
    METHOD_IDS,
    TOL_CLAMP,
    OptimizerError,
    SolverOptions,
    alternating_rgd_run,
    initialize,
    inner_tolerance,
    newton_run,
    rgd_run,
    solve,
    stop_check,
)
from gpeopt.oracles import dense_ground_state

ALL_GRADIENT = ("pl2-rgd", "ea-rgd", "lgr-rgd")


@pytest.fixture(scope="module")
def small():
    """Shared small two-component problem plus its brute-force ground state."""
    disc = make_disc(p=2, h=0.25)
    oracle = dense_ground_state(disc.problem, disc.space)
    return disc, oracle


# ----------------------------------------------------------------- options
def test_options_reject_unknown_method():
    with pytest.raises(OptimizerError, match="unknown method"):
        SolverOptions(method="newton")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"tau": 0.0},
        {"tau": -1.0},
        {"tol": 0.0},
        {"max_outer": 0},
        {"omega": 0.0},
        {"omega": 1.5},
        {"method": "rn", "alternating": True},
        {"alternating": True, "line_search": True},
        {"method": "rn", "line_search": True},
        {"init_target": -1e-3},
    ],
)
def test_options_reject_invalid_fields(kwargs):
    with pytest.raises(OptimizerError):
        SolverOptions(**kwargs)


def test_options_omega_defaults_per_method():
    assert SolverOptions(method="reg-rn").resolved_omega == 0.99
    assert SolverOptions(method="lgr-rgd").resolved_omega == 1.0
    assert SolverOptions(method="rn").resolved_omega == 1.0
    assert SolverOptions(method="reg-rn", omega=0.5).resolved_omega == 0.5


def test_options_newton_flag():
    flags = {m: SolverOptions(method=m).is_newton for m in METHOD_IDS}
    assert flags == {
        "pl2-rgd": False, "ea-rgd": False, "lgr-rgd": False,
        "rn": True, "reg-rn": True,
    }


# -------------------------------------------------------------- stop check
def test_stop_check_below_tolerance_stops():
    assert stop_check(1e-9, 1e-8) == "converged"


def test_stop_check_equality_continues():
    # the comparison is strict
    assert stop_check(1e-8, 1e-8) == "continue"
    assert stop_check(2e-8, 1e-8) == "continue"


def test_stop_check_non_finite_aborts():
    assert stop_check(float("nan"), 1e-8) == "abort"
    assert stop_check(float("inf"), 1e-8) == "abort"


# ------------------------------------------------------- inner solve targets
def test_inner_tolerance_passes_residual_through_in_1d():
    assert inner_tolerance(1e-3, 1) == 1e-3


def test_inner_tolerance_is_ten_times_looser_in_2d():
    assert inner_tolerance(1e-3, 2) == pytest.approx(1e-2)


def test_inner_tolerance_init_phase_factor():
    assert inner_tolerance(1e-3, 1, init_phase=True) == pytest.approx(
        1e-3 * INIT_INNER_FACTOR
    )


def test_inner_tolerance_clamped_on_both_ends():
    assert inner_tolerance(10.0, 1) == TOL_CLAMP[1]
    assert inner_tolerance(1e-20, 1) == TOL_CLAMP[0]
    assert inner_tolerance(1e-3, 1, init_phase=True) >= TOL_CLAMP[0]


def test_inner_tolerance_keeps_per_component_shape():
    out = inner_tolerance(np.array([1e-3, 1e-5, 10.0]), 1)
    assert_allclose(out, [1e-3, 1e-5, TOL_CLAMP[1]])


# ------------------------------------------------------------ initialization
def test_initialize_huge_target_returns_retracted_constants():
    disc = make_disc(p=2, h=0.25)
    Phi, sweeps = initialize(disc, target=1e9)
    assert sweeps == 0
    length = disc.problem.domain[0][1] - disc.problem.domain[0][0]
    expected = np.sqrt(np.asarray(disc.masses) / length)
    assert_allclose(Phi, np.broadcast_to(expected, Phi.shape), atol=1e-14)


def test_initialize_reaches_default_target_and_is_deterministic():
    disc = make_disc(p=2, h=0.25)
    Phi1, s1 = initialize(disc)
    Phi2, s2 = initialize(disc)
    assert s1 == s2 == 5
    assert np.array_equal(Phi1, Phi2)
    _, per = disc.residual_norms(disc.residual(Phi1, disc.assemble_hamiltonian(Phi1)).R)
    assert float(np.sqrt(np.sum(per**2))) < 1e-2
    assert feasibility_error(Phi1, disc.M, disc.masses) < 1e-12


def test_initialize_sweep_cap_is_an_error():
    disc = make_disc(p=2, h=0.25)
    with pytest.raises(OptimizerError, match="initialization failed"):
        initialize(disc, target=1e-13, max_sweeps=2)


# ------------------------------------------------------------- driver guards
def test_drivers_reject_foreign_methods():
    disc = make_disc(p=1, h=0.5)
    Phi = random_feasible(disc, seed=0)
    with pytest.raises(OptimizerError):
        rgd_run(disc, Phi, SolverOptions(method="rn"))
    with pytest.raises(OptimizerError):
        alternating_rgd_run(disc, Phi, SolverOptions(method="reg-rn"))
    with pytest.raises(OptimizerError):
        newton_run(disc, Phi, SolverOptions(method="ea-rgd"))


# ------------------------------------------------------------- small problem
@pytest.mark.parametrize("method,alternating", [
    ("pl2-rgd", False), ("pl2-rgd", True),
    ("ea-rgd", False), ("ea-rgd", True),
    ("lgr-rgd", False), ("lgr-rgd", True),
    ("rn", False), ("reg-rn", False),
])
def test_every_method_reaches_the_oracle_ground_state(small, method, alternating):
    disc, oracle = small
    report = solve(disc, SolverOptions(method=method, alternating=alternating,
                                       tol=1e-10))
    assert report.converged
    assert report.residual < 1e-10
    assert abs(report.energy - oracle.energy) <= 1e-9 * abs(oracle.energy)
    assert_allclose(report.sigma, oracle.sigma, rtol=1e-6)
    assert feasibility_error(report.Phi, disc.M, disc.masses) <= 1e-12


def test_converging_methods_agree_with_each_other(small):
    disc, _ = small
    energies = {}
    for method in METHOD_IDS:
        report = solve(disc, SolverOptions(method=method, tol=1e-10))
        assert report.converged
        energies[method] = report.energy
    values = np.array(list(energies.values()))
    spread = (values.max() - values.min()) / abs(values.mean())
    assert spread <= 1e-7


def test_single_component_alternating_matches_plain_run():
    disc = make_disc(p=1, h=0.25)
    Phi0, _ = initialize(disc)
    plain = rgd_run(disc, Phi0, SolverOptions(method="ea-rgd", tol=1e-10))
    swept = alternating_rgd_run(
        disc, Phi0, SolverOptions(method="ea-rgd", alternating=True, tol=1e-10)
    )
    assert plain.iterations == swept.iterations
    assert np.max(np.abs(plain.Phi - swept.Phi)) < 1e-12
    for a, b in zip(plain.rows, swept.rows):
        assert a.residual == pytest.approx(b.residual, rel=1e-4, abs=1e-14)


def test_restart_at_a_critical_point_terminates_immediately(small):
    disc, _ = small
    converged = solve(disc, SolverOptions(method="ea-rgd", tol=1e-10))
    again = rgd_run(disc, converged.Phi, SolverOptions(method="ea-rgd", tol=1e-8))
    assert again.converged
    assert again.iterations == 0
    assert len(again.rows) == 1


def test_energy_decays_monotonically_at_small_step(small):
    disc, _ = small
    report = solve(disc, SolverOptions(method="ea-rgd", tau=0.1, tol=1e-8,
                                       max_outer=3000))
    assert report.converged
    energies = np.array([row.energy for row in report.rows])
    assert np.all(np.diff(energies) <= 1e-12)


def test_line_search_converges_and_decays(small):
    disc, oracle = small
    report = solve(disc, SolverOptions(method="ea-rgd", line_search=True, tol=1e-10))
    assert report.converged
    energies = np.array([row.energy for row in report.rows])
    assert np.all(np.diff(energies) <= 1e-12)
    assert abs(report.energy - oracle.energy) <= 1e-9 * abs(oracle.energy)


def test_final_components_nonnegative_from_constant_start(small):
    disc, _ = small
    report = solve(disc, SolverOptions(method="ea-rgd", tol=1e-10))
    undershoot = report.Phi.min(axis=0)
    scale = np.abs(report.Phi).max(axis=0)
    assert np.all(undershoot >= -1e-8 * scale)


def test_trajectory_iterates_stay_feasible(small):
    disc, _ = small
    Phi0, _ = initialize(disc)
    for cap in (1, 2, 4):
        report = rgd_run(disc, Phi0, SolverOptions(method="ea-rgd", tol=1e-14,
                                                   max_outer=cap))
        assert feasibility_error(report.Phi, disc.M, disc.masses) <= 1e-10


# -------------------------------------------------------------- report shape
def test_report_rows_and_counters(small):
    disc, _ = small
    counter = MatvecCounter()
    Phi0 = random_feasible(disc, seed=3)
    report = rgd_run(disc, Phi0, SolverOptions(method="ea-rgd", tol=1e-8),
                     counter=counter)
    assert report.converged
    assert [row.k for row in report.rows] == list(range(len(report.rows)))
    assert report.iterations == report.rows[-1].k
    # row 0 records the starting state before any update step
    assert report.rows[0].energy == pytest.approx(disc.energy(Phi0), rel=1e-13)
    # every inner matvec is attributed to exactly one row
    assert sum(row.inner_matvecs for row in report.rows) == report.matvecs
    assert report.matvecs == counter.count
    walls = [row.wall_ms for row in report.rows]
    assert all(b >= a for a, b in zip(walls, walls[1:]))


def test_max_outer_exhaustion_is_reported(small):
    disc, _ = small
    Phi0, _ = initialize(disc)
    report = rgd_run(disc, Phi0, SolverOptions(method="ea-rgd", tol=1e-14,
                                               max_outer=1))
    assert not report.converged
    assert "max outer iterations" in report.reason
    assert report.iterations == 1
    assert len(report.rows) == 2


def test_non_finite_start_aborts(small):
    disc, _ = small
    Phi0 = random_feasible(disc, seed=4)
    Phi0[0, 0] = np.nan
    report = rgd_run(disc, Phi0, SolverOptions(method="ea-rgd", tol=1e-8))
    assert not report.converged
    assert report.reason.startswith("aborted")
    assert len(report.rows) == 1


def test_solve_records_init_sweeps_only_when_it_initialized(small):
    disc, _ = small
    with_init = solve(disc, SolverOptions(method="ea-rgd", tol=1e-8))
    assert with_init.init_sweeps == 5
    direct = rgd_run(disc, with_init.Phi, SolverOptions(method="ea-rgd", tol=1e-8))
    assert direct.init_sweeps is None


# ------------------------------------------------------------- newton runs
@pytest.fixture(scope="module")
def coarse_bench100():
    problem = bench1d_problem(100.0)
    return Discretization(problem, build_space(problem.domain, 0.25))


def test_plain_newton_breaks_down_far_from_the_minimizer(coarse_bench100):
    disc = coarse_bench100
    ones = retract(np.ones((disc.n, disc.p)), disc.M, disc.masses)
    report = newton_run(disc, ones, SolverOptions(method="rn", tol=1e-8,
                                                  max_outer=50))
    assert not report.converged
    assert "indefinite" in report.reason


def test_hybrid_fallback_recovers_from_breakdown(coarse_bench100):
    disc = coarse_bench100
    ones = retract(np.ones((disc.n, disc.p)), disc.M, disc.masses)
    report = newton_run(disc, ones, SolverOptions(method="rn", tol=1e-8,
                                                  max_outer=400, hybrid=True))
    assert report.converged
    assert report.residual < 1e-8


def test_newton_methods_converge_from_standard_init(coarse_bench100):
    disc = coarse_bench100
    Phi0, _ = initialize(disc)
    plain = newton_run(disc, Phi0, SolverOptions(method="rn", tol=1e-8,
                                                 max_outer=60))
    regularized = newton_run(disc, Phi0, SolverOptions(method="reg-rn", tol=1e-8,
                                                       max_outer=200))
    assert plain.converged and regularized.converged
    assert regularized.inner_breakdowns == 0
    assert abs(plain.energy - regularized.energy) <= 1e-7 * abs(plain.energy)
