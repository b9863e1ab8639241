"""Discrete energy and its derived operators for the coupled problem.

A :class:`Discretization` binds a validated problem to a FE space.  It owns the
constant matrices (mass, stiffness, per-component potential terms) as data
arrays over the mesh's canonical sparsity pattern, so every state-dependent
operator — the per-component Hamiltonians, the pairwise coupling blocks, the
metric operators — is formed by cheap data-array arithmetic plus one gather
when Dirichlet reduction is active.  All sparse matrix-vector products are
routed through a shared counter so per-iteration work is reported exactly.

Column conventions: states and tangent blocks are (n_active, p) arrays; the
coupling operator's output column k is ``sum_j 2 kappa_kj M_{phi_k phi_j} z_j``
(a dual vector, no mass inverse applied).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import FemSpace, assemble_mass
from .linalg import (
    Ilu0Preconditioner,
    JacobiPreconditioner,
    LinearSolverError,
    MatvecCounter,
    mass_solve,
    pcg,
)
from .manifold import ManifoldError, MetricKind
from .model import ModelError, ProblemSpec, evaluate_potentials, validate

__all__ = [
    "Discretization",
    "HamiltonianParts",
    "ResidualData",
]


@dataclass
class HamiltonianParts:
    """State-dependent operator pieces assembled at one outer iterate.

    ``A[j]`` is component j's Hamiltonian; ``diag_data[i]`` holds the pattern
    data of the plain density block of component i (weight phi_i^2, no
    interaction factor); ``cross`` caches the mixed blocks (weight
    phi_i * phi_j) for i < j when they were requested.
    """

    A: list
    diag_data: np.ndarray
    vals: np.ndarray
    cross: dict = field(default_factory=dict)
    _diag_cache: dict = field(default_factory=dict)

    def cross_block(self, disc: "Discretization", i: int, j: int) -> sp.csr_matrix:
        """Weighted mass block M_{phi_i phi_j}; symmetric in (i, j)."""
        if i == j:
            if i not in self._diag_cache:
                self._diag_cache[i] = disc.active_matrix(self.diag_data[i])
            return self._diag_cache[i]
        key = (min(i, j), max(i, j))
        if key not in self.cross:
            raise ValueError(f"cross block {key} was not assembled; pass cross='all'")
        return self.cross[key]


@dataclass
class ResidualData:
    """Residual columns r_j = A_j phi_j - sigma_j M phi_j with its byproducts."""

    R: np.ndarray
    sigma: np.ndarray
    MPhi: np.ndarray
    APhi: np.ndarray


class Discretization:
    """A problem bound to a mesh: matrices, energies, residuals, Hessian action."""

    def __init__(self, problem: ProblemSpec, space: FemSpace,
                 precond: str = "ilu0"):
        report = validate(problem)
        if report.errors:
            raise ModelError("; ".join(report.errors))
        if problem.bc != space.bc:
            raise ManifoldError(
                f"problem requests bc={problem.bc!r} but the space was built with {space.bc!r}"
            )
        if precond not in ("ilu0", "jacobi"):
            raise LinearSolverError(
                f"unknown preconditioner kind {precond!r}; choose 'ilu0' or 'jacobi'"
            )
        self._precond_kind = precond
        self.problem = problem
        self.space = space
        self.validation = report
        self.p = problem.p
        self.masses = np.asarray(problem.masses, dtype=float)
        self.K = problem.interaction.kappa

        M_full = assemble_mass(space)
        self._S_data = space.scatter_constant(space._local_stiffness)
        self._M_data = M_full.data.copy()
        fields = evaluate_potentials(problem, space)
        self.potential_nodal = fields.nodal
        self.quad_V = fields.quad
        self._MV_data = np.stack(
            [space.weighted_mass_data(self.quad_V[j]) for j in range(self.p)]
        )

        if space.bc == "dirichlet":
            probe = sp.csr_matrix(
                (np.arange(space.nnz, dtype=np.int64), space.indices, space.indptr),
                shape=(space.n, space.n),
            )
            reduced = probe[space.free][:, space.free].tocsr()
            reduced.sort_indices()
            self._active_slots = reduced.data.astype(np.int64)
            self._active_indices = reduced.indices.copy()
            self._active_indptr = reduced.indptr.copy()
        else:
            self._active_slots = None
            self._active_indices = space.indices
            self._active_indptr = space.indptr
        self.n = space.n_free

        self.M = self.active_matrix(self._M_data)
        self.S = self.active_matrix(self._S_data)
        self.mass_diag = self.M.diagonal()
        self.A0 = [
            self.active_matrix(self._S_data + self._MV_data[j]) for j in range(self.p)
        ]
        self._precond: dict = {}

    # ------------------------------------------------------------- structure
    def active_matrix(self, full_data: np.ndarray) -> sp.csr_matrix:
        """CSR matrix on the active dofs from canonical-pattern data."""
        if self._active_slots is not None:
            full_data = full_data[self._active_slots]
        return sp.csr_matrix(
            (full_data, self._active_indices, self._active_indptr), shape=(self.n, self.n)
        )

    def matvec(self, mat: sp.csr_matrix, x: np.ndarray, counter: MatvecCounter | None):
        if counter is not None:
            counter.add(x.shape[1] if x.ndim == 2 else 1)
        return mat @ x

    def expand_state(self, Phi: np.ndarray) -> np.ndarray:
        """Zero-pad active coefficients back to the full node set."""
        return self.space.expand(Phi)

    def preconditioner(self, j: int):
        """ILU(0) of the density-free operator S + M_{V_j}, built once per
        component (or its diagonal when the discretization was constructed
        with ``precond="jacobi"``)."""
        if j not in self._precond:
            if self._precond_kind == "jacobi":
                self._precond[j] = JacobiPreconditioner(self.A0[j].diagonal())
                return self._precond[j]
            try:
                self._precond[j] = Ilu0Preconditioner(self.A0[j])
            except LinearSolverError as exc:
                warnings.warn(
                    f"ILU(0) failed for component {j} ({exc}); falling back to Jacobi",
                    RuntimeWarning,
                )
                self._precond[j] = JacobiPreconditioner(self.A0[j].diagonal())
        return self._precond[j]

    # --------------------------------------------------------------- fields
    def values_at_quads(self, Phi: np.ndarray) -> np.ndarray:
        """Component values at quadrature points, shape (p, E, Q)."""
        full = self.expand_state(Phi)
        return np.stack([self.space.evaluate(full[:, j]) for j in range(self.p)])

    def diag_density_data(self, vals_j: np.ndarray) -> np.ndarray:
        """Pattern data of the weighted mass with weight vals_j^2."""
        return self.space.weighted_mass_data(vals_j * vals_j)

    def component_hamiltonian(self, k: int, diag_data: np.ndarray) -> sp.csr_matrix:
        """A_k = S + M_{V_k} + sum_i kappa_ik * (density block of component i)."""
        rho = np.einsum("i,ie->e", self.K[:, k], diag_data)
        return self.active_matrix(self._S_data + self._MV_data[k] + rho)

    def component_metric(self, j: int, diag_data: np.ndarray, sigma_j: float,
                         omega: float) -> sp.csr_matrix:
        """Lagrangian-style metric operator of one component from current
        density data: A_j + 2 kappa_jj M_{phi_j phi_j} - omega sigma_j M."""
        rho = np.einsum("i,ie->e", self.K[:, j], diag_data)
        data = (
            self._S_data + self._MV_data[j] + rho
            + 2.0 * self.K[j, j] * diag_data[j]
            - omega * sigma_j * self._M_data
        )
        return self.active_matrix(data)

    def assemble_hamiltonian(
        self, Phi: np.ndarray, cross: str = "none", vals: np.ndarray | None = None
    ) -> HamiltonianParts:
        """Assemble all per-component Hamiltonians at the state Phi.

        ``cross`` controls which pairwise blocks are kept: ``"none"`` for plain
        energy/residual work, ``"all"`` when the coupling operator or Hessian
        action is needed.
        """
        if vals is None:
            vals = self.values_at_quads(Phi)
        diag_data = np.stack([self.diag_density_data(vals[i]) for i in range(self.p)])
        A = []
        for k in range(self.p):
            rho = np.einsum("i,ie->e", self.K[:, k], diag_data)
            A.append(self.active_matrix(self._S_data + self._MV_data[k] + rho))
        parts = HamiltonianParts(A=A, diag_data=diag_data, vals=vals)
        if cross == "all":
            for i in range(self.p):
                for j in range(i + 1, self.p):
                    data = self.space.weighted_mass_data(vals[i] * vals[j])
                    parts.cross[(i, j)] = self.active_matrix(data)
        elif cross != "none":
            raise ValueError(f"cross must be 'none' or 'all', got {cross!r}")
        return parts

    # --------------------------------------------------------------- energy
    def energy(self, Phi: np.ndarray, vals: np.ndarray | None = None,
               counter: MatvecCounter | None = None) -> float:
        """Total energy by direct quadrature of the potential/interaction terms."""
        if vals is None:
            vals = self.values_at_quads(Phi)
        kinetic = 0.5 * float(np.einsum("ij,ij->", Phi, self.matvec(self.S, Phi, counter)))
        qw = self.space.quad_weights
        vals2 = vals * vals
        pot = 0.5 * float(np.einsum("jeq,jeq,q->", self.quad_V, vals2, qw))
        rho = np.einsum("ij,ieq->jeq", self.K, vals2)
        inter = 0.25 * float(np.einsum("jeq,jeq,q->", rho, vals2, qw))
        return kinetic + pot + inter

    def energy_quadratic_form(self, Phi: np.ndarray,
                              parts: HamiltonianParts | None = None) -> float:
        """Energy recomputed through assembled matrices (consistency path)."""
        if parts is None:
            parts = self.assemble_hamiltonian(Phi)
        total = 0.0
        for j in range(self.p):
            rho = np.einsum("i,ie->e", self.K[:, j], parts.diag_data)
            half = self.active_matrix(self._S_data + self._MV_data[j] + 0.5 * rho)
            total += 0.5 * float(Phi[:, j] @ (half @ Phi[:, j]))
        return total

    # ------------------------------------------------------------- residuals
    def residual(self, Phi: np.ndarray, parts: HamiltonianParts,
                 counter: MatvecCounter | None = None) -> ResidualData:
        """Columns A_j phi_j - sigma_j M phi_j and the Rayleigh quotients."""
        APhi = np.empty_like(Phi)
        for j in range(self.p):
            APhi[:, j] = self.matvec(parts.A[j], Phi[:, j : j + 1], counter)[:, 0]
        MPhi = self.matvec(self.M, Phi, counter)
        sigma = np.einsum("ij,ij->j", Phi, APhi) / self.masses
        R = APhi - MPhi * sigma[None, :]
        return ResidualData(R=R, sigma=sigma, MPhi=MPhi, APhi=APhi)

    def residual_norms(self, R: np.ndarray,
                       counter: MatvecCounter | None = None) -> tuple[float, np.ndarray]:
        """Total and per-component mass-norms of the residual columns.

        This is the trace form sqrt(sum_j r_j^T M r_j) used for stopping,
        initialization targets, and adaptive inner tolerances.  (Measuring the
        same columns in the M^{-1} norm instead makes the standard
        initialization land far closer to the minimizer and changes which
        methods converge on the strongly coupled benchmarks.)
        """
        MR = self.matvec(self.M, R, counter)
        per2 = np.einsum("ij,ij->j", R, MR)
        per = np.sqrt(np.maximum(per2, 0.0))
        return float(np.sqrt(max(per2.sum(), 0.0))), per

    # ---------------------------------------------------------------- B and H
    def apply_B(self, parts: HamiltonianParts, Z: np.ndarray,
                counter: MatvecCounter | None = None) -> np.ndarray:
        """Coupling operator in dual form: column k = sum_j 2 kappa_kj M_{phi_k phi_j} z_j."""
        out = np.zeros_like(Z)
        for k in range(self.p):
            for j in range(self.p):
                if self.K[k, j] == 0.0:
                    continue
                block = parts.cross_block(self, k, j)
                out[:, k] += 2.0 * self.K[k, j] * self.matvec(block, Z[:, j : j + 1], counter)[:, 0]
        return out

    def hessian_dual(self, Phi: np.ndarray, parts: HamiltonianParts, resid: ResidualData,
                     Z: np.ndarray, omega: float = 1.0,
                     counter: MatvecCounter | None = None) -> np.ndarray:
        """Dual Hessian action M . Hess[Z] (tangent-projected, no mass inverse).

        Column j is the L2-tangent-projected dual vector
        ``(A_j - omega sigma_j M) z_j + sum_i B_ji z_i``; ``omega = 1`` is the
        exact Hessian, ``omega < 1`` its regularization.
        """
        out = self.apply_B(parts, Z, counter)
        MZ = self.matvec(self.M, Z, counter)
        for j in range(self.p):
            out[:, j] += (
                self.matvec(parts.A[j], Z[:, j : j + 1], counter)[:, 0]
                - omega * resid.sigma[j] * MZ[:, j]
            )
        coef = np.einsum("ij,ij->j", Phi, out) / self.masses
        return out - resid.MPhi * coef[None, :]

    def hessian_apply(self, Phi: np.ndarray, parts: HamiltonianParts, resid: ResidualData,
                      Z: np.ndarray, omega: float = 1.0,
                      counter: MatvecCounter | None = None) -> np.ndarray:
        """Primal Hessian action: mass-solve of :meth:`hessian_dual` columns."""
        dual = self.hessian_dual(Phi, parts, resid, Z, omega, counter)
        return mass_solve(self.M, dual, counter=counter, diag=self.mass_diag)

    # ---------------------------------------------------------------- metrics
    def metric_operators(self, parts: HamiltonianParts, sigma: np.ndarray,
                         metric: MetricKind) -> list:
        """Per-component SPD operators G_j realizing the metric."""
        if metric.kind == "l2":
            return [self.M] * self.p
        if metric.kind == "energy_adaptive":
            return list(parts.A)
        ops = []
        for j in range(self.p):
            data = (
                parts.A[j].data
                + 2.0 * self.K[j, j] * parts.cross_block(self, j, j).data
                - metric.omega * sigma[j] * self.M.data
            )
            ops.append(
                sp.csr_matrix((data, self._active_indices, self._active_indptr),
                              shape=(self.n, self.n))
            )
        return ops

    def metric_solve(self, G: sp.csr_matrix, j: int, b: np.ndarray, rel_tol: float,
                     counter: MatvecCounter | None = None,
                     max_iter: int | None = None, strict: bool = True,
                     abs_tol: float = 0.0) -> np.ndarray:
        """Apply G_j^{-1} by ILU-preconditioned CG; breakdown means indefiniteness.

        The solve accepts a relative tolerance, an absolute residual target,
        or both (the looser one governs).  The adaptive outer policies pass
        their targets through ``abs_tol``.  With ``strict=False`` a solve
        that bottoms out above the target returns its best iterate instead
        of raising; alternating sweeps use this because their per-component
        targets are recorded a sweep earlier and can undershoot the
        preconditioned-CG floor once a component is nearly converged.
        """
        x, stats = pcg(
            G, b, precond=self.preconditioner(j), rel_tol=rel_tol,
            max_iter=max_iter, counter=counter, abs_tol=abs_tol,
        )
        if stats.breakdown:
            raise ManifoldError(
                f"metric operator of component {j} is indefinite "
                "(inner-solver breakdown); a smaller omega may restore definiteness"
            )
        if strict and not stats.converged:
            raise LinearSolverError(
                f"inner solve for component {j} stalled at relative residual "
                f"{stats.rel_residual:.3e} (rel_tol {rel_tol:.3e}, abs_tol {abs_tol:.3e})"
            )
        return x

    def riemannian_gradient(self, Phi: np.ndarray, parts: HamiltonianParts,
                            resid: ResidualData, metric: MetricKind,
                            tols, counter: MatvecCounter | None = None,
                            absolute: bool = False) -> np.ndarray:
        """Gradient columns G_j^{-1}(r_j - theta_j M phi_j), tangent by construction.

        ``tols`` is a per-component array of inner-solve tolerances —
        relative by default, absolute residual targets with ``absolute=True``
        (the convention of the adaptive outer policies).  For the L2 metric
        the two solves collapse to mass solves; for the others each column
        takes two ILU-preconditioned CG solves.
        """
        tols = np.broadcast_to(np.asarray(tols, dtype=float), (self.p,))
        grad = np.empty_like(Phi)
        if metric.kind == "l2":
            W = mass_solve(self.M, resid.R, counter=counter, diag=self.mass_diag)
            coef = np.einsum("ij,ij->j", Phi, resid.R) / self.masses
            return W - Phi * coef[None, :]
        ops = self.metric_operators(parts, resid.sigma, metric)
        for j in range(self.p):
            rel, ab = (0.0, float(tols[j])) if absolute else (float(tols[j]), 0.0)
            v = self.metric_solve(ops[j], j, resid.R[:, j], rel, counter, abs_tol=ab)
            u = self.metric_solve(ops[j], j, resid.MPhi[:, j], rel, counter, abs_tol=ab)
            denom = float(resid.MPhi[:, j] @ u)
            if denom <= 0:
                raise ManifoldError(
                    f"metric operator of component {j} lost positivity; "
                    "a smaller omega may help"
                )
            theta = float(resid.MPhi[:, j] @ v) / denom
            grad[:, j] = v - theta * u
        return grad
