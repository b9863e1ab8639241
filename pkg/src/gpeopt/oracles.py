"""Independent brute-force verification paths used by the test suite.

Everything here favors transparency over speed: dense matrices, oversampled
quadrature, an independently derived basis (monomial coefficients from a
Vandermonde solve rather than the hand-written nodal formulas), full
eigensolves, and numerical differentiation of the actual update map.  These
routines never reuse production assembly for the quantity they check, and they
refuse problem sizes where dense linear algebra would stop being trivially
trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fem import GAUSS_POINTS_PER_AXIS, FemSpace
from .manifold import MetricKind, metric_apply, project_tangent_l2, retract
from .model import ProblemSpec, _trap_values, potential_values, read_potential_file
from .operators import Discretization

__all__ = [
    "DenseGroundState",
    "FdGradientReport",
    "LocalRateEstimate",
    "OracleError",
    "dense_ground_state",
    "dense_quadrature_energy",
    "fd_gradient_check",
    "local_rate_oracle",
]

MAX_DENSE_NODES = 500


class OracleError(RuntimeError):
    """Raised when an oracle refuses or fails; tests skip with the message."""


# ------------------------------------------------------- independent FE path
def _monomial_coeffs() -> np.ndarray:
    """Coefficients of the quadratic nodal basis solved from a Vandermonde system."""
    nodes = np.array([0.0, 0.5, 1.0])
    V = np.vander(nodes, 3, increasing=True)
    return np.linalg.inv(V)  # column k holds monomial coefficients of basis k


def _eval_basis_1d(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    C = _monomial_coeffs()
    powers = np.stack([np.ones_like(xi), xi, xi**2], axis=1)
    dpowers = np.stack([np.zeros_like(xi), np.ones_like(xi), 2.0 * xi], axis=1)
    return powers @ C, dpowers @ C


@dataclass
class _DenseTables:
    basis: np.ndarray  # (Q, k)
    grads: np.ndarray  # (Q, k, dim)
    weights: np.ndarray  # (Q,) physical
    points: np.ndarray  # (E, Q, dim) physical


def _dense_tables(space: FemSpace, extra: int = 3) -> _DenseTables:
    q = GAUSS_POINTS_PER_AXIS + extra
    t, w = np.polynomial.legendre.leggauss(q)
    xi = 0.5 * (t + 1.0)
    wr = 0.5 * w
    vals, ders = _eval_basis_1d(xi)
    if space.dim == 1:
        h = space.h[0]
        basis = vals
        grads = (ders / h)[:, :, None]
        weights = wr * h
        offsets = (xi * h)[:, None]
    else:
        hx, hy = space.h
        ii, jj = np.meshgrid(np.arange(q), np.arange(q), indexing="xy")
        ii, jj = ii.ravel(), jj.ravel()
        basis = np.einsum("qa,qb->qba", vals[ii], vals[jj]).reshape(-1, 9)
        gx = np.einsum("qa,qb->qba", ders[ii] / hx, vals[jj]).reshape(-1, 9)
        gy = np.einsum("qa,qb->qba", vals[ii], ders[jj] / hy).reshape(-1, 9)
        grads = np.stack([gx, gy], axis=-1)
        weights = wr[ii] * wr[jj] * hx * hy
        offsets = np.column_stack([xi[ii] * hx, xi[jj] * hy])
    origins = space.nodes[space.elem_dofs[:, 0]]
    points = origins[:, None, :] + offsets[None, :, :]
    return _DenseTables(basis=basis, grads=grads, weights=weights, points=points)


def _potential_at(problem: ProblemSpec, space: FemSpace, j: int,
                  tables: _DenseTables) -> np.ndarray:
    """Component potential at the oracle's quadrature points, shape (E, Q)."""
    spec = problem.potentials[j]
    flat = tables.points.reshape(-1, space.dim)
    if spec.kind == "nodal_file":
        data = read_potential_file(spec.path)
        if data.shape != (space.n,):
            raise OracleError(f"potential file length {data.shape} != nodes {space.n}")
        vals = data[space.elem_dofs] @ tables.basis.T
        trap = _trap_values(spec, flat, problem.domain).reshape(vals.shape)
        return vals + trap
    return potential_values(spec, flat, problem.domain).reshape(
        space.n_elements, len(tables.weights)
    )


def _component_values(space: FemSpace, tables: _DenseTables, coeffs: np.ndarray):
    return coeffs[space.elem_dofs] @ tables.basis.T


def _dense_scatter(space: FemSpace, local: np.ndarray) -> np.ndarray:
    n = space.n
    out = np.zeros((n, n))
    dofs = space.elem_dofs
    rows = dofs[:, :, None]
    cols = dofs[:, None, :]
    np.add.at(out, (rows, cols), local)
    return out


def _dense_mass(space: FemSpace, tables: _DenseTables, weight=None) -> np.ndarray:
    if weight is None:
        w = np.broadcast_to(tables.weights, (space.n_elements, len(tables.weights)))
    else:
        w = weight * tables.weights[None, :]
    local = np.einsum("eq,qi,qj->eij", w, tables.basis, tables.basis)
    return _dense_scatter(space, local)


def _dense_stiffness(space: FemSpace, tables: _DenseTables) -> np.ndarray:
    local = np.einsum("q,qid,qjd->ij", tables.weights, tables.grads, tables.grads)
    return _dense_scatter(space, np.broadcast_to(local, (space.n_elements, *local.shape)))


def _active(space: FemSpace, dense: np.ndarray) -> np.ndarray:
    if space.bc == "dirichlet":
        return dense[np.ix_(space.free, space.free)]
    return dense


# ----------------------------------------------------------- energy by quadrature
def dense_quadrature_energy(problem: ProblemSpec, space: FemSpace, Phi: np.ndarray,
                            oversample: int = 3) -> float:
    """Energy evaluated by direct oversampled quadrature of the integrand.

    ``Phi`` holds active-dof coefficients.  Refuses meshes beyond
    ``MAX_DENSE_NODES`` nodes.
    """
    if space.n > MAX_DENSE_NODES:
        raise OracleError(f"dense oracle refuses n = {space.n} > {MAX_DENSE_NODES}")
    tables = _dense_tables(space, extra=oversample)
    full = space.expand(Phi)
    p = full.shape[1]
    K = problem.interaction.kappa
    vals = np.stack([_component_values(space, tables, full[:, j]) for j in range(p)])
    grads = np.stack(
        [np.einsum("ek,qkd->eqd", full[space.elem_dofs][:, :, j], tables.grads)
         for j in range(p)]
    )
    vals2 = vals * vals
    rho = np.einsum("ij,ieq->jeq", K, vals2)
    dens = 0.0
    for j in range(p):
        Vq = _potential_at(problem, space, j, tables)
        dens += np.einsum(
            "eq,q->", 0.5 * (grads[j] ** 2).sum(axis=-1) + 0.5 * Vq * vals2[j]
            + 0.25 * rho[j] * vals2[j], tables.weights,
        )
    return float(dens)


# --------------------------------------------------- finite-difference gradients
@dataclass
class FdGradientReport:
    """Worst relative FD error per step and the observed convergence order."""

    steps: tuple
    worst_errors: np.ndarray
    order: float


def fd_gradient_check(disc: Discretization, Phi: np.ndarray, metric: MetricKind,
                      trials: int = 5, seed: int = 0,
                      steps: tuple = (1e-3, 1e-4, 1e-5)) -> FdGradientReport:
    """Directional-derivative check of the Riemannian gradient.

    For random M-normalized tangent directions Z the identity
    ``d/dt E(Phi + t Z)|_0 = g(grad, Z)`` is tested by central differences;
    the error of a second-order difference scheme must shrink quadratically.
    """
    rng = np.random.default_rng(seed)
    parts = disc.assemble_hamiltonian(Phi)
    resid = disc.residual(Phi, parts)
    grad = disc.riemannian_gradient(Phi, parts, resid, metric, 1e-13)
    ops = disc.metric_operators(parts, resid.sigma, metric)
    worst = np.zeros(len(steps))
    for _ in range(trials):
        Z = project_tangent_l2(Phi, disc.M, disc.masses, rng.standard_normal(Phi.shape))
        norms = np.sqrt(np.einsum("ij,ij->j", Z, disc.M @ Z))
        Z /= max(norms.max(), 1e-300)
        reference = float(np.einsum("ij,ij->", metric_apply(ops, grad), Z))
        for s, t in enumerate(steps):
            fd = (disc.energy(Phi + t * Z) - disc.energy(Phi - t * Z)) / (2.0 * t)
            scale = max(abs(fd), abs(reference), 1e-300)
            worst[s] = max(worst[s], abs(fd - reference) / scale)
    order = float(np.log(worst[0] / worst[1]) / np.log(steps[0] / steps[1]))
    return FdGradientReport(steps=tuple(steps), worst_errors=worst, order=order)


# ------------------------------------------------------------- dense ground state
@dataclass
class DenseGroundState:
    """Reference minimizer from the damped dense self-consistent iteration."""

    Phi: np.ndarray
    sigma: np.ndarray
    energy: float
    sweeps: int
    residual: float


def dense_ground_state(problem: ProblemSpec, space: FemSpace, tol: float = 1e-13,
                       damping: float = 0.5, max_sweeps: int = 100_000) -> DenseGroundState:
    """Ground state by damped self-consistent dense eigensolves.

    Each sweep replaces every component in turn by the lowest generalized
    eigenvector of its frozen Hamiltonian, mixed with factor ``damping`` and
    renormalized; iteration continues until the residual (same mass-weighted
    trace norm the solvers use for stopping) falls below ``tol``.  Returns the
    sign representative whose largest-magnitude entries are nonnegative.
    """
    if space.n > MAX_DENSE_NODES:
        raise OracleError(f"dense oracle refuses n = {space.n} > {MAX_DENSE_NODES}")
    tables = _dense_tables(space)
    p = problem.p
    masses = np.asarray(problem.masses, dtype=float)
    K = problem.interaction.kappa

    M = _active(space, _dense_mass(space, tables))
    S = _active(space, _dense_stiffness(space, tables))
    MV = [
        _active(space, _dense_mass(space, tables, weight=_potential_at(problem, space, j, tables)))
        for j in range(p)
    ]
    n = M.shape[0]

    def expand(col):
        if space.bc == "dirichlet":
            full = np.zeros(space.n)
            full[space.free] = col
            return full
        return col

    def density_blocks(Phi):
        vals2 = np.stack(
            [_component_values(space, tables, expand(Phi[:, i])) ** 2 for i in range(p)]
        )
        return [
            _active(space, _dense_mass(space, tables, weight=vals2[i])) for i in range(p)
        ]

    def hamiltonian(j, blocks):
        return S + MV[j] + sum(K[i, j] * blocks[i] for i in range(p))

    Phi = np.ones((n, p))
    norms = np.sqrt(np.einsum("ij,ij->j", Phi, M @ Phi))
    Phi *= np.sqrt(masses) / norms

    sigma = np.zeros(p)
    res = np.inf
    best = np.inf
    best_sweep = 0
    for sweep in range(1, max_sweeps + 1):
        for j in range(p):
            blocks = density_blocks(Phi)
            A = hamiltonian(j, blocks)
            eigvals, eigvecs = scipy.linalg.eigh(A, M, subset_by_index=[0, 0])
            v = eigvecs[:, 0]
            v *= np.sqrt(masses[j]) / np.sqrt(v @ M @ v)
            if v @ M @ Phi[:, j] < 0:
                v = -v
            mixed = (1.0 - damping) * Phi[:, j] + damping * v
            nrm = np.sqrt(mixed @ M @ mixed)
            if nrm <= 1e-300:
                raise OracleError("dense SCF mixed iterate collapsed to zero")
            Phi[:, j] = np.sqrt(masses[j]) * mixed / nrm
        blocks = density_blocks(Phi)
        res2 = 0.0
        for j in range(p):
            A = hamiltonian(j, blocks)
            Aphi = A @ Phi[:, j]
            sigma[j] = Phi[:, j] @ Aphi / masses[j]
            r = Aphi - sigma[j] * (M @ Phi[:, j])
            res2 += r @ M @ r
        res = np.sqrt(max(res2, 0.0))
        if res < tol:
            break
        if res < 0.999 * best:
            best, best_sweep = res, sweep
        elif sweep - best_sweep > 500:
            raise OracleError(
                f"dense SCF stagnated at residual {best:.3e} "
                f"(target {tol:.1e}, sweep {sweep})"
            )
    else:
        raise OracleError(
            f"dense SCF stalled: residual {res:.3e} after {max_sweeps} sweeps"
        )

    for j in range(p):
        if Phi[np.argmax(np.abs(Phi[:, j])), j] < 0:
            Phi[:, j] = -Phi[:, j]

    energy = dense_quadrature_energy(problem, space, Phi)
    return DenseGroundState(Phi=Phi, sigma=sigma.copy(), energy=energy,
                            sweeps=sweep, residual=float(res))


# ------------------------------------------------------------------ local rate
@dataclass
class LocalRateEstimate:
    """Spectrum of the linearized one-step map and the predicted local rate."""

    mu: np.ndarray
    rho: float
    tau: float
    max_imag: float


def _earg_step(disc: Discretization, X: np.ndarray, tau: float) -> np.ndarray:
    """One dense energy-adaptive gradient step (the map whose rate is predicted)."""
    parts = disc.assemble_hamiltonian(X)
    resid = disc.residual(X, parts)
    W = np.empty_like(X)
    for j in range(disc.p):
        W[:, j] = np.linalg.solve(parts.A[j].toarray(), resid.R[:, j])
    c = np.einsum("ij,ij->j", resid.MPhi, W)
    direction = X - (X - W) / (1.0 - c / disc.masses)[None, :]
    return retract(X - tau * direction, disc.M, disc.masses)


def local_rate_oracle(disc: Discretization, Phi_star: np.ndarray,
                      tau: float) -> LocalRateEstimate:
    """Eigenvalues of the linearized gradient step at a converged state.

    Differentiates the actual one-step update map by central differences along
    an M-orthonormal tangent basis, then reads off the contraction factor
    rho = max_i |1 - tau + tau mu_i| from the eigenvalues of the map's
    Jacobian restricted to the tangent space.  Refuses unconverged states and
    problems too large for dense spectral work.
    """
    n, p = Phi_star.shape
    if n * p > 1000:
        raise OracleError(f"local-rate oracle refuses n*p = {n * p} > 1000")
    parts = disc.assemble_hamiltonian(Phi_star)
    resid = disc.residual(Phi_star, parts)
    res, _ = disc.residual_norms(resid.R)
    if res > 1e-10:
        raise OracleError(f"state is not converged (residual {res:.3e} > 1e-10)")

    Md = disc.M.toarray()
    L = np.linalg.cholesky(Md)
    bases = []
    for j in range(p):
        yhat = L.T @ Phi_star[:, j]
        By = scipy.linalg.null_space(yhat[None, :])
        bases.append(scipy.linalg.solve_triangular(L.T, By))  # M-orthonormal, tangent

    def coords(Y):
        segs = [bases[j].T @ (Md @ Y[:, j]) for j in range(p)]
        return np.concatenate(segs)

    scale = np.sqrt(np.asarray(disc.masses).sum())
    delta = 1e-6 * scale
    dim = sum(b.shape[1] for b in bases)
    T = np.empty((dim, dim))
    col = 0
    for j in range(p):
        for m in range(bases[j].shape[1]):
            Xp = Phi_star.copy()
            Xm = Phi_star.copy()
            Xp[:, j] += delta * bases[j][:, m]
            Xm[:, j] -= delta * bases[j][:, m]
            diff = (_earg_step(disc, Xp, tau) - _earg_step(disc, Xm, tau)) / (2.0 * delta)
            T[:, col] = coords(diff)
            col += 1

    eigs = np.linalg.eigvals(T)
    max_imag = float(np.max(np.abs(eigs.imag)))
    mu = (eigs.real - 1.0 + tau) / tau
    mu.sort()
    return LocalRateEstimate(
        mu=mu, rho=float(np.max(np.abs(eigs))), tau=tau, max_imag=max_imag
    )
