"""Geometry of the mass-constrained state manifold.

States are n-by-p coefficient matrices whose columns carry prescribed squared
M-norms (the particle numbers); tangent vectors at a state have columns
M-orthogonal to it.  This module provides the feasibility measure, the
per-column normalization retraction, metric applications, and tangent
projections for the product-structure metrics (each component has its own SPD
operator G_j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ManifoldError",
    "MetricKind",
    "column_mass_norms",
    "feasibility_error",
    "metric_apply",
    "project_tangent",
    "project_tangent_l2",
    "retract",
    "tangency_error",
]


class ManifoldError(ValueError):
    """Raised for degenerate states or invalid metric descriptions."""


@dataclass(frozen=True)
class MetricKind:
    """Which per-component SPD operator G_j measures tangent vectors.

    ``"l2"`` uses the mass matrix, ``"energy_adaptive"`` the current
    Hamiltonian A_j, and ``"lagrangian"`` A_j + B_jj - omega * sigma_j * M
    with omega in (0, 1].
    """

    kind: str
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in ("l2", "energy_adaptive", "lagrangian"):
            raise ManifoldError(f"unknown metric kind {self.kind!r}")
        if self.kind == "lagrangian" and not (0.0 < self.omega <= 1.0):
            raise ManifoldError(f"lagrangian metric needs omega in (0, 1], got {self.omega}")

    @classmethod
    def l2(cls) -> "MetricKind":
        return cls("l2")

    @classmethod
    def energy_adaptive(cls) -> "MetricKind":
        return cls("energy_adaptive")

    @classmethod
    def lagrangian(cls, omega: float = 1.0) -> "MetricKind":
        return cls("lagrangian", omega)


def column_mass_norms(Phi: np.ndarray, M) -> np.ndarray:
    """Squared M-norms of the columns."""
    return np.einsum("ij,ij->j", Phi, M @ Phi)


def feasibility_error(Phi: np.ndarray, M, masses) -> float:
    """Worst relative deviation of the column mass constraints."""
    masses = np.asarray(masses, dtype=float)
    norms = column_mass_norms(Phi, M)
    return float(np.max(np.abs(norms - masses) / masses))


def retract(Phi: np.ndarray, M, masses) -> np.ndarray:
    """Rescale each column onto its mass constraint.

    Preserves column directions (output is a positive multiple of the input
    column); a column with vanishing M-norm has no direction to preserve and
    raises :class:`ManifoldError`.
    """
    masses = np.asarray(masses, dtype=float)
    norms = column_mass_norms(Phi, M)
    if np.min(norms) <= 1e-300 or not np.isfinite(norms).all():
        raise ManifoldError(
            f"cannot retract a degenerate state (column squared norms {norms})"
        )
    return Phi * np.sqrt(masses / norms)[None, :]


def tangency_error(Phi: np.ndarray, M, Z: np.ndarray) -> float:
    """Largest absolute column constraint violation of a tangent candidate."""
    return float(np.max(np.abs(np.einsum("ij,ij->j", Phi, M @ Z))))


def metric_apply(metric_ops, Z: np.ndarray) -> np.ndarray:
    """Apply per-component metric operators columnwise (dual representation)."""
    out = np.empty_like(Z)
    for j, G in enumerate(metric_ops):
        out[:, j] = G @ Z[:, j]
    return out


def project_tangent_l2(
    Phi: np.ndarray, M, masses, U: np.ndarray, MPhi: np.ndarray | None = None
) -> np.ndarray:
    """M-orthogonal projection onto the tangent space (G_j = M)."""
    masses = np.asarray(masses, dtype=float)
    if MPhi is None:
        MPhi = M @ Phi
    coef = np.einsum("ij,ij->j", MPhi, U) / masses
    return U - Phi * coef[None, :]


def project_tangent(Phi: np.ndarray, M, masses, U: np.ndarray, g_solve) -> np.ndarray:
    """Metric-orthogonal projection onto the tangent space.

    ``g_solve(j, b)`` must apply the inverse of component j's metric operator.
    Column j maps to ``u_j - (phi_j^T M u_j) / (phi_j^T M w_j) * w_j`` with
    ``w_j = G_j^{-1} M phi_j``; for the L2 metric this reduces to
    :func:`project_tangent_l2`.
    """
    masses = np.asarray(masses, dtype=float)
    MPhi = M @ Phi
    out = np.empty_like(U)
    for j in range(Phi.shape[1]):
        w = g_solve(j, MPhi[:, j])
        denom = float(MPhi[:, j] @ w)
        if denom <= 0:
            raise ManifoldError(
                f"metric operator of component {j} is not positive on M*phi"
            )
        coef = float(MPhi[:, j] @ U[:, j]) / denom
        out[:, j] = U[:, j] - coef * w
    return out
