"""Outer iterations: metric gradient descent, its alternating variant,
Newton-type steps, the standard initialization sweep, and stopping logic.

Conventions shared by every driver:

* the residual is evaluated *before* a step, and the iteration count is the
  number of update steps actually performed;
* row ``k`` of a report describes the state after ``k`` updates, so row 0 is
  the starting state of the run;
* every recorded iterate is feasible (re-retracted whenever the constraint
  drifts beyond 1e-10 relative);
* inner Krylov accuracies follow the adaptive policy: the solver's residual
  target is the current (per-component for gradient methods, total for
  Newton-type methods) residual norm, 10x looser on 2D meshes, scaled by
  1.5e-8 during the initialization phase, clamped to [1e-14, 1e-1] — and it
  is an *absolute* target on the inner solver's residual, so the effective
  relative accuracy of the linear solves tightens as the outer iteration
  approaches a minimizer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .linalg import LinearSolverError, MatvecCounter, projected_solve
from .manifold import (
    ManifoldError,
    MetricKind,
    feasibility_error,
    retract,
)
from .operators import Discretization, HamiltonianParts, ResidualData

__all__ = [
    "ConvergenceReport",
    "IterationRecord",
    "METHOD_IDS",
    "OptimizerError",
    "SolverOptions",
    "alternating_rgd_run",
    "initialize",
    "newton_run",
    "rgd_run",
    "solve",
    "stop_check",
]

METHOD_IDS = ("pl2-rgd", "ea-rgd", "lgr-rgd", "rn", "reg-rn")
GRADIENT_METHODS = ("pl2-rgd", "ea-rgd", "lgr-rgd")
NEWTON_METHODS = ("rn", "reg-rn")
TOL_CLAMP = (1e-14, 1e-1)
INIT_INNER_FACTOR = 1.5e-8
FEASIBILITY_DRIFT = 1e-10


class OptimizerError(RuntimeError):
    """Configuration or algorithmic failure of an outer iteration."""


@dataclass
class SolverOptions:
    """How to drive one run.

    ``omega`` defaults per method (0.99 for the regularized Newton method,
    1.0 otherwise); ``alternating`` applies to gradient methods only;
    ``hybrid`` lets a Newton run recover from an indefinite inner system by
    taking one energy-adaptive gradient step instead of terminating;
    ``line_search`` enables Armijo backtracking (halving, at most 30 halvings,
    sufficient-decrease constant 1e-4) for non-alternating gradient methods.
    ``inner_policy`` names how inner Krylov targets are derived; only the
    adaptive absolute-residual policy described in the module docstring is
    implemented, so any other id is rejected.
    """

    method: str = "ea-rgd"
    alternating: bool = False
    tau: float = 1.0
    omega: float | None = None
    tol: float = 1e-8
    max_outer: int = 20000
    hybrid: bool = False
    line_search: bool = False
    init_target: float | None = None
    init_max_sweeps: int = 10000
    inner_policy: str = "adaptive-absolute"

    def __post_init__(self):
        if self.method not in METHOD_IDS:
            raise OptimizerError(
                f"unknown method {self.method!r}; choose one of {', '.join(METHOD_IDS)}"
            )
        if self.tau <= 0:
            raise OptimizerError(f"step size must be positive, got {self.tau}")
        if self.tol <= 0:
            raise OptimizerError(f"tolerance must be positive, got {self.tol}")
        if self.max_outer < 1:
            raise OptimizerError("max_outer must be at least 1")
        if self.omega is not None and not 0.0 < self.omega <= 1.0:
            raise OptimizerError(f"omega must lie in (0, 1], got {self.omega}")
        if self.alternating and self.method in NEWTON_METHODS:
            raise OptimizerError("alternating sweeps apply to gradient methods only")
        if self.line_search and (self.alternating or self.method in NEWTON_METHODS):
            raise OptimizerError(
                "line search is available for non-alternating gradient methods only"
            )
        if self.init_target is not None and self.init_target <= 0:
            raise OptimizerError("init_target must be positive")
        if self.inner_policy != "adaptive-absolute":
            raise OptimizerError(
                f"unknown inner-tolerance policy {self.inner_policy!r}; "
                "only 'adaptive-absolute' is implemented"
            )

    @property
    def resolved_omega(self) -> float:
        if self.omega is not None:
            return self.omega
        return 0.99 if self.method == "reg-rn" else 1.0

    @property
    def is_newton(self) -> bool:
        return self.method in NEWTON_METHODS


@dataclass
class IterationRecord:
    """One report row: state diagnostics after ``k`` update steps."""

    k: int
    energy: float
    residual: float
    sigma: np.ndarray
    inner_matvecs: int
    wall_ms: float


@dataclass
class ConvergenceReport:
    """Everything one run produced: rows, termination, and the final state.

    ``inner_breakdowns`` counts update steps whose second-order system turned
    out indefinite and that proceeded with the partial Krylov iterate (only
    the regularized Newton method does this; at omega=1 a breakdown ends the
    run instead).
    """

    method: str
    rows: list
    converged: bool
    reason: str
    Phi: np.ndarray
    sigma: np.ndarray
    energy: float
    residual: float
    matvecs: int
    init_sweeps: int | None = None
    inner_breakdowns: int = 0

    @property
    def iterations(self) -> int:
        """Number of update steps performed."""
        return self.rows[-1].k

    @property
    def wall_ms(self) -> float:
        return self.rows[-1].wall_ms


def stop_check(residual: float, tol: float) -> str:
    """Decide from the freshly evaluated residual: continue, stop, or abort."""
    if not np.isfinite(residual):
        return "abort"
    if residual < tol:
        return "converged"
    return "continue"


def inner_tolerance(base, dim: int, init_phase: bool = False):
    """Adaptive Krylov residual target from a residual norm (scalar or per-component)."""
    scale = np.asarray(base, dtype=float)
    if dim == 2:
        scale = scale * 10.0
    if init_phase:
        scale = scale * INIT_INNER_FACTOR
    return np.clip(scale, TOL_CLAMP[0], TOL_CLAMP[1])


# ------------------------------------------------------------ step directions
def _solve_coefficients(disc: Discretization, parts: HamiltonianParts,
                        resid: ResidualData, targets, counter) -> tuple:
    """Per-component solves W_j = A_j^{-1} r_j and overlaps c_j = phi_j^T M W_j."""
    W = np.empty_like(resid.R)
    for j in range(disc.p):
        W[:, j] = disc.metric_solve(parts.A[j], j, resid.R[:, j], 0.0, counter,
                                    abs_tol=float(targets[j]))
    c = np.einsum("ij,ij->j", resid.MPhi, W)
    return W, c


def _gradient_direction(disc: Discretization, Phi: np.ndarray,
                        parts: HamiltonianParts, resid: ResidualData,
                        options: SolverOptions, targets, counter) -> np.ndarray:
    """Descent direction Z of the chosen gradient method (subtract tau*Z)."""
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (disc.p,))
    if options.method == "lgr-rgd":
        metric = MetricKind.lagrangian(options.resolved_omega)
        return disc.riemannian_gradient(Phi, parts, resid, metric, targets, counter,
                                        absolute=True)
    W, c = _solve_coefficients(disc, parts, resid, targets, counter)
    if options.method == "pl2-rgd":
        return W - Phi * (c / disc.masses)[None, :]
    denom = disc.masses - c
    if np.any(denom <= 0):
        raise OptimizerError(
            "energy-adaptive update degenerate: component overlap phi^T M A^{-1} r "
            "reached the constraint mass"
        )
    return (W * disc.masses[None, :] - Phi * c[None, :]) / denom[None, :]


def _armijo_step(disc: Discretization, Phi: np.ndarray, Z: np.ndarray,
                 resid: ResidualData, energy: float, tau: float,
                 counter) -> np.ndarray:
    """Backtracking update: halve tau until sufficient decrease along -Z.

    Near a minimizer the requested decrease 1e-4*tau*slope drops below the
    floating-point resolution of the energy itself; the comparison is then
    meaningless and the step is accepted as-is rather than halved to death.
    """
    slope = float(np.einsum("ij,ij->", Z, resid.R))
    if slope <= 0:
        return retract(Phi - tau * Z, disc.M, disc.masses)
    floor = 8.0 * np.finfo(float).eps * abs(energy)
    for _ in range(31):
        cand = retract(Phi - tau * Z, disc.M, disc.masses)
        decrease = 1e-4 * tau * slope
        if decrease <= floor or disc.energy(cand, counter=counter) <= energy - decrease:
            return cand
        tau *= 0.5
    raise OptimizerError("line search failed to find sufficient decrease in 30 halvings")


def _alternating_sweep(disc: Discretization, Phi: np.ndarray, diag_data: np.ndarray,
                       vals: np.ndarray, options: SolverOptions, targets,
                       counter, tau: float | None = None) -> None:
    """One component-by-component sweep, updating ``Phi``/``diag_data``/``vals``.

    Each component's operator is rebuilt from the most recently updated
    components before its solve; only the density block of the component just
    updated is refreshed mid-sweep.  The update is the per-component metric
    gradient step followed by that component's normalization.

    ``targets`` carries the per-component absolute inner residual targets
    derived from the residual recorded at the top of the outer iteration.
    For the component updated last in the previous sweep that recorded norm
    can undershoot what preconditioned CG can certify; the solves therefore
    run in non-strict mode and keep the best iterate when they bottom out at
    the solver's floor.
    """
    tau = options.tau if tau is None else tau
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (disc.p,))
    omega = options.resolved_omega
    for j in range(disc.p):
        A = disc.component_hamiltonian(j, diag_data)
        phi = Phi[:, j]
        Aphi = disc.matvec(A, phi[:, None], counter)[:, 0]
        Mphi = disc.matvec(disc.M, phi[:, None], counter)[:, 0]
        sigma = float(phi @ Aphi) / disc.masses[j]
        r = Aphi - sigma * Mphi
        ab = float(targets[j])
        if options.method == "lgr-rgd":
            G = disc.component_metric(j, diag_data, sigma, omega)
            v = disc.metric_solve(G, j, r, 0.0, counter, strict=False, abs_tol=ab)
            u = disc.metric_solve(G, j, Mphi, 0.0, counter, strict=False, abs_tol=ab)
            denom = float(Mphi @ u)
            if denom <= 0:
                raise ManifoldError(
                    f"metric operator of component {j} lost positivity; "
                    "a smaller omega may help"
                )
            z = v - (float(Mphi @ v) / denom) * u
        else:
            w = disc.metric_solve(A, j, r, 0.0, counter, strict=False, abs_tol=ab)
            c = float(Mphi @ w)
            if options.method == "pl2-rgd":
                z = w - (c / disc.masses[j]) * phi
            else:
                denom = disc.masses[j] - c
                if denom <= 0:
                    raise OptimizerError(
                        "energy-adaptive update degenerate: component overlap "
                        "phi^T M A^{-1} r reached the constraint mass"
                    )
                z = (disc.masses[j] * w - c * phi) / denom
        stepped = (phi - tau * z)[:, None]
        Phi[:, j] = retract(stepped, disc.M, disc.masses[j : j + 1])[:, 0]
        vals[j] = disc.space.evaluate(disc.space.expand(Phi[:, j]))
        diag_data[j] = disc.diag_density_data(vals[j])


# -------------------------------------------------------------- shared driver
class _InnerBreakdown(Exception):
    pass


def _drive(disc: Discretization, Phi: np.ndarray, options: SolverOptions,
           counter: MatvecCounter, step, cross: str,
           init_sweeps: int | None) -> ConvergenceReport:
    start = time.perf_counter()
    rows: list = []
    last_count = counter.count
    k = 0
    converged = False
    reason = ""
    while True:
        parts = disc.assemble_hamiltonian(Phi, cross=cross)
        resid = disc.residual(Phi, parts, counter)
        res, res_per = disc.residual_norms(resid.R, counter)
        energy = disc.energy(Phi, vals=parts.vals, counter=counter)
        rows.append(IterationRecord(
            k=k, energy=energy, residual=res, sigma=resid.sigma.copy(),
            inner_matvecs=counter.count - last_count,
            wall_ms=(time.perf_counter() - start) * 1e3,
        ))
        last_count = counter.count
        decision = stop_check(res, options.tol)
        if not np.isfinite(energy):
            decision = "abort"
        if decision == "converged":
            converged, reason = True, "converged"
            break
        if decision == "abort":
            reason = "aborted: non-finite energy or residual"
            break
        if k >= options.max_outer:
            reason = f"max outer iterations reached ({options.max_outer})"
            break
        try:
            Phi = step(Phi, parts, resid, res, res_per, energy)
        except _InnerBreakdown as exc:
            if options.hybrid:
                targets = inner_tolerance(res_per, disc.space.dim)
                Z = _gradient_direction(
                    disc, Phi, parts, resid,
                    SolverOptions(method="ea-rgd", tol=options.tol), targets, counter,
                )
                Phi = retract(Phi - options.tau * Z, disc.M, disc.masses)
            else:
                reason = f"not converged: {exc} at iteration {k}"
                break
        if feasibility_error(Phi, disc.M, disc.masses) > FEASIBILITY_DRIFT:
            Phi = retract(Phi, disc.M, disc.masses)
        k += 1
    final = rows[-1]
    return ConvergenceReport(
        method=options.method, rows=rows, converged=converged, reason=reason,
        Phi=Phi, sigma=final.sigma, energy=final.energy, residual=final.residual,
        matvecs=counter.count, init_sweeps=init_sweeps,
    )


# ------------------------------------------------------------------- drivers
def rgd_run(disc: Discretization, Phi0: np.ndarray, options: SolverOptions,
            counter: MatvecCounter | None = None,
            init_sweeps: int | None = None) -> ConvergenceReport:
    """Gradient descent under the method's metric with constant step size."""
    if options.method not in GRADIENT_METHODS:
        raise OptimizerError(f"rgd_run cannot drive method {options.method!r}")
    if options.alternating:
        return alternating_rgd_run(disc, Phi0, options, counter, init_sweeps)
    counter = counter if counter is not None else MatvecCounter()

    def step(Phi, parts, resid, res, res_per, energy):
        targets = inner_tolerance(res_per, disc.space.dim)
        Z = _gradient_direction(disc, Phi, parts, resid, options, targets, counter)
        if options.line_search:
            return _armijo_step(disc, Phi, Z, resid, energy, options.tau, counter)
        return retract(Phi - options.tau * Z, disc.M, disc.masses)

    return _drive(disc, Phi0.copy(), options, counter, step, "none", init_sweeps)


def alternating_rgd_run(disc: Discretization, Phi0: np.ndarray,
                        options: SolverOptions,
                        counter: MatvecCounter | None = None,
                        init_sweeps: int | None = None) -> ConvergenceReport:
    """Gradient descent with component-sequential updates (one sweep per step)."""
    if options.method not in GRADIENT_METHODS:
        raise OptimizerError(f"alternating_rgd_run cannot drive {options.method!r}")
    counter = counter if counter is not None else MatvecCounter()

    def step(Phi, parts, resid, res, res_per, energy):
        targets = inner_tolerance(res_per, disc.space.dim)
        out = Phi.copy()
        _alternating_sweep(disc, out, parts.diag_data, parts.vals, options, targets,
                           counter)
        return out

    return _drive(disc, Phi0.copy(), options, counter, step, "none", init_sweeps)


def newton_run(disc: Discretization, Phi0: np.ndarray, options: SolverOptions,
               counter: MatvecCounter | None = None,
               init_sweeps: int | None = None) -> ConvergenceReport:
    """Newton-type iteration: solve the (possibly regularized) second-order
    system on the tangent space and retract the full step.

    An indefinite system (negative curvature in the inner solver) ends the
    run when omega=1 — the plain second-order method has no business far from
    a minimizer — while the regularized variant continues with the partial
    Krylov iterate accumulated before the curvature failure (a truncated
    step), counting the event in the report.
    """
    if not options.is_newton:
        raise OptimizerError(f"newton_run cannot drive method {options.method!r}")
    counter = counter if counter is not None else MatvecCounter()
    omega = options.resolved_omega
    breakdowns = [0]

    def step(Phi, parts, resid, res, res_per, energy):
        grad = disc.riemannian_gradient(Phi, parts, resid, MetricKind.l2(),
                                        np.full(disc.p, 1e-13), counter)
        target = float(inner_tolerance(res, disc.space.dim))

        def apply_hess(Z):
            return disc.hessian_dual(Phi, parts, resid, Z, omega, counter)

        Z, stats = projected_solve(
            Phi, disc.M, disc.masses, apply_hess, -grad, rel_tol=0.0,
            abs_tol=target, max_iter=max(1000, 10 * disc.n * disc.p),
            precond=[disc.preconditioner(j) for j in range(disc.p)],
            counter=counter, mass_diag=disc.mass_diag,
        )
        if stats.breakdown:
            if omega < 1.0 and np.any(Z):
                breakdowns[0] += 1
            else:
                raise _InnerBreakdown(
                    "second-order system is indefinite (inner solver breakdown)"
                )
        elif not stats.converged:
            raise LinearSolverError(
                f"inner solve for the second-order system stalled at relative "
                f"residual {stats.rel_residual:.3e} (target {target:.3e})"
            )
        return retract(Phi + Z, disc.M, disc.masses)

    report = _drive(disc, Phi0.copy(), options, counter, step, "all", init_sweeps)
    report.inner_breakdowns = breakdowns[0]
    return report


# ------------------------------------------------------------- initialization
def initialize(disc: Discretization, counter: MatvecCounter | None = None,
               target: float | None = None,
               max_sweeps: int = 10000) -> tuple[np.ndarray, int]:
    """Standard start: constant columns retracted, then alternating
    energy-adaptive sweeps with unit step until the residual target.

    The default target is 1e-2 on 1D meshes and 1e-4 on 2D meshes.  Returns
    the state and the number of sweeps it took.
    """
    counter = counter if counter is not None else MatvecCounter()
    if target is None:
        target = 1e-2 if disc.space.dim == 1 else 1e-4
    options = SolverOptions(method="ea-rgd", alternating=True, tau=1.0)
    Phi = retract(np.ones((disc.n, disc.p)), disc.M, disc.masses)
    sweeps = 0
    while True:
        parts = disc.assemble_hamiltonian(Phi)
        resid = disc.residual(Phi, parts, counter)
        res, res_per = disc.residual_norms(resid.R, counter)
        if not np.isfinite(res):
            raise OptimizerError("initialization aborted: non-finite residual")
        if res < target:
            return Phi, sweeps
        if sweeps >= max_sweeps:
            raise OptimizerError(
                f"initialization failed to reach residual {target:.1e} in "
                f"{max_sweeps} sweeps (residual {res:.3e})"
            )
        targets = inner_tolerance(res_per, disc.space.dim, init_phase=True)
        _alternating_sweep(disc, Phi, parts.diag_data, parts.vals, options, targets,
                           counter, tau=1.0)
        sweeps += 1


# --------------------------------------------------------------------- facade
def solve(disc: Discretization, options: SolverOptions,
          Phi0: np.ndarray | None = None,
          counter: MatvecCounter | None = None) -> ConvergenceReport:
    """Initialize (unless a start is given) and run the configured method."""
    counter = counter if counter is not None else MatvecCounter()
    init_sweeps = None
    if Phi0 is None:
        Phi0, init_sweeps = initialize(
            disc, counter, target=options.init_target,
            max_sweeps=options.init_max_sweeps,
        )
    if options.is_newton:
        return newton_run(disc, Phi0, options, counter, init_sweeps)
    if options.alternating:
        return alternating_rgd_run(disc, Phi0, options, counter, init_sweeps)
    return rgd_run(disc, Phi0, options, counter, init_sweeps)
