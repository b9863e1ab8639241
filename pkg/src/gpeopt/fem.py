"""Quadratic Lagrange finite elements on uniform interval and rectangle meshes.

Nodes are ordered lexicographically with the x index fastest (2D global index
``iy * nx + ix``).  All matrices produced by a given :class:`FemSpace` share one
canonical CSR sparsity pattern, so matrices can be combined cheaply by adding
their ``.data`` arrays.  Assembly scatters element contributions through a
precomputed slot-position table with :func:`numpy.bincount`, which makes
reassembly bitwise reproducible.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

#: Gauss-Legendre points per axis.  Exact through polynomial degree 9, which
#: covers products of four quadratic factors (degree 8) on affine elements.
GAUSS_POINTS_PER_AXIS = 5

#: Hard cap on matrix entries so slot indices stay within 32-bit range.
ENTRY_CAPACITY = 2**31 - 1

__all__ = [
    "FemError",
    "FemSpace",
    "GAUSS_POINTS_PER_AXIS",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_weighted_mass",
    "build_space",
    "constrain_dirichlet",
]


class FemError(ValueError):
    """Raised for invalid meshes, weights, or boundary-condition misuse."""


def _basis_1d(xi: np.ndarray) -> np.ndarray:
    """Values of the three quadratic nodal basis functions at ``xi`` in [0, 1]."""
    xi = np.asarray(xi, dtype=float)
    return np.stack(
        [(1.0 - xi) * (1.0 - 2.0 * xi), 4.0 * xi * (1.0 - xi), xi * (2.0 * xi - 1.0)],
        axis=-1,
    )


def _basis_1d_deriv(xi: np.ndarray) -> np.ndarray:
    """Reference derivatives of the quadratic nodal basis at ``xi`` in [0, 1]."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([4.0 * xi - 3.0, 4.0 - 8.0 * xi, 4.0 * xi - 1.0], axis=-1)


def _normalize_domain(domain) -> tuple[tuple[float, float], ...]:
    arr = np.asarray(domain, dtype=float)
    if arr.shape == (2,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] not in (1, 2):
        raise FemError(f"domain must be (lo, hi) or a pair of axis intervals, got {domain!r}")
    for lo, hi in arr:
        if not np.isfinite([lo, hi]).all() or hi <= lo:
            raise FemError(f"degenerate axis interval ({lo}, {hi})")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


class FemSpace:
    """Uniform tensor-product mesh of quadratic Lagrange elements.

    Attributes
    ----------
    dim : int
        1 or 2.
    domain : tuple of (lo, hi)
        One interval per axis.
    h : tuple of float
        Element size per axis.
    cells : tuple of int
        Element count per axis.
    n : int
        Total number of nodes, ``prod(2 * cells + 1)``.
    nodes : ndarray, shape (n, dim)
        Node coordinates, x index fastest.
    bc : str
        ``"natural"`` or ``"dirichlet"``.
    free : ndarray of int
        Indices of unconstrained nodes (all nodes under natural conditions).
    """

    order = 2

    def __init__(self, domain, h, bc: str = "natural"):
        if bc not in ("natural", "dirichlet"):
            raise FemError(f"bc must be 'natural' or 'dirichlet', got {bc!r}")
        self.domain = _normalize_domain(domain)
        self.dim = len(self.domain)
        self.bc = bc

        if np.isscalar(h):
            h_axes = [float(h)] * self.dim
        else:
            h_axes = [float(v) for v in h]
            if len(h_axes) != self.dim:
                raise FemError(f"h has {len(h_axes)} entries for a {self.dim}D domain")
        cells = []
        for (lo, hi), ha in zip(self.domain, h_axes):
            if ha <= 0:
                raise FemError(f"element size must be positive, got {ha}")
            ratio = (hi - lo) / ha
            m = int(round(ratio))
            if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
                raise FemError(
                    f"element size {ha} does not divide axis length {hi - lo} "
                    f"into a whole number of cells (ratio {ratio})"
                )
            cells.append(m)
        self.cells = tuple(cells)
        self.h = tuple(h_axes)

        nodes_per_axis = [2 * m + 1 for m in self.cells]
        n_total = int(np.prod(nodes_per_axis, dtype=np.int64))
        n_elems = int(np.prod(self.cells, dtype=np.int64))
        if n_elems * (3**self.dim) ** 2 > ENTRY_CAPACITY:
            raise FemError(
                f"mesh with {n_total} nodes exceeds the assembly index capacity"
            )
        self.n = n_total
        self.n_elements = n_elems
        self._nodes_per_axis = tuple(nodes_per_axis)

        axis_coords = [
            lo + 0.5 * ha * np.arange(npa)
            for (lo, _), ha, npa in zip(self.domain, self.h, nodes_per_axis)
        ]
        if self.dim == 1:
            self.nodes = axis_coords[0][:, None].copy()
        else:
            xg, yg = np.meshgrid(axis_coords[0], axis_coords[1], indexing="xy")
            self.nodes = np.column_stack([xg.ravel(), yg.ravel()])

        self._build_element_tables()
        self._build_quadrature()
        self._build_pattern()
        self._build_boundary()
        self._local_mass = self._local_matrix_mass()
        self._local_stiffness = self._local_matrix_stiffness()
        self._quad_points = None

    # ------------------------------------------------------------------ build
    def _build_element_tables(self) -> None:
        if self.dim == 1:
            (m,) = self.cells
            base = 2 * np.arange(m, dtype=np.int64)[:, None]
            self.elem_dofs = base + np.arange(3, dtype=np.int64)[None, :]
        else:
            mx, my = self.cells
            nx = self._nodes_per_axis[0]
            ex = np.arange(mx, dtype=np.int64)
            ey = np.arange(my, dtype=np.int64)
            gx, gy = np.meshgrid(ex, ey, indexing="xy")
            ox = 2 * gx.ravel()[:, None]
            oy = 2 * gy.ravel()[:, None]
            a = np.arange(3, dtype=np.int64)
            local_x = np.tile(a, 3)[None, :]
            local_y = np.repeat(a, 3)[None, :]
            self.elem_dofs = (oy + local_y) * nx + (ox + local_x)
        self.dofs_per_element = self.elem_dofs.shape[1]

    def _build_quadrature(self) -> None:
        t, w = np.polynomial.legendre.leggauss(GAUSS_POINTS_PER_AXIS)
        xi = 0.5 * (t + 1.0)
        w_ref = 0.5 * w
        vals = _basis_1d(xi)
        ders = _basis_1d_deriv(xi)
        if self.dim == 1:
            self.quad_weights = w_ref * self.h[0]
            self.quad_offsets = (xi * self.h[0])[:, None]
            self._basis = vals
            grads = ders / self.h[0]
            self._grad_basis = grads[:, :, None]
        else:
            hx, hy = self.h
            qx, qy = np.meshgrid(np.arange(len(xi)), np.arange(len(xi)), indexing="xy")
            qx = qx.ravel()
            qy = qy.ravel()
            self.quad_weights = w_ref[qx] * w_ref[qy] * hx * hy
            self.quad_offsets = np.column_stack([xi[qx] * hx, xi[qy] * hy])
            vx, vy = vals[qx], vals[qy]
            dx, dy = ders[qx] / hx, ders[qy] / hy
            self._basis = np.einsum("qa,qb->qba", vx, vy).reshape(len(qx), 9)
            gx = np.einsum("qa,qb->qba", dx, vy).reshape(len(qx), 9)
            gy = np.einsum("qa,qb->qba", vx, dy).reshape(len(qx), 9)
            self._grad_basis = np.stack([gx, gy], axis=-1)
        self.n_quad = len(self.quad_weights)
        self._basis_outer = np.einsum("qi,qj->qij", self._basis, self._basis)

    def _build_pattern(self) -> None:
        k = self.dofs_per_element
        rows = np.repeat(self.elem_dofs, k, axis=1).ravel()
        cols = np.tile(self.elem_dofs, (1, k)).ravel()
        keys = rows * np.int64(self.n) + cols
        unique = np.unique(keys)
        self.nnz = len(unique)
        self.indices = (unique % self.n).astype(np.int32)
        self.indptr = np.searchsorted(
            unique, np.arange(self.n + 1, dtype=np.int64) * self.n
        ).astype(np.int32)
        self._slots = np.searchsorted(unique, keys).astype(np.int32)

    def _build_boundary(self) -> None:
        if self.dim == 1:
            ix = np.arange(self.n)
            on_boundary = (ix == 0) | (ix == self.n - 1)
        else:
            nx, ny = self._nodes_per_axis
            ix = np.arange(self.n) % nx
            iy = np.arange(self.n) // nx
            on_boundary = (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)
        self.boundary_mask = on_boundary
        if self.bc == "dirichlet":
            self.free = np.flatnonzero(~on_boundary)
        else:
            self.free = np.arange(self.n)
        self.n_free = len(self.free)

    def _local_matrix_mass(self) -> np.ndarray:
        return np.einsum(
            "qi,q,qj->ij", self._basis, self.quad_weights, self._basis
        )

    def _local_matrix_stiffness(self) -> np.ndarray:
        return np.einsum(
            "qid,q,qjd->ij", self._grad_basis, self.quad_weights, self._grad_basis
        )

    # ------------------------------------------------------------ evaluation
    def quad_points(self) -> np.ndarray:
        """Physical quadrature points, shape (n_elements, n_quad, dim)."""
        if self._quad_points is None:
            origins = self.nodes[self.elem_dofs[:, 0]]
            self._quad_points = origins[:, None, :] + self.quad_offsets[None, :, :]
        return self._quad_points

    def evaluate(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate a FE function (full-length nodal coefficients) at quad points."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.n,):
            raise FemError(f"expected {self.n} nodal coefficients, got shape {coeffs.shape}")
        return coeffs[self.elem_dofs] @ self._basis.T

    def interpolate(self, f: Callable) -> np.ndarray:
        """Nodal values of a callable; 1D callables receive a flat coordinate array."""
        pts = self.nodes[:, 0] if self.dim == 1 else self.nodes
        vals = np.asarray(f(pts), dtype=float)
        if vals.shape != (self.n,):
            raise FemError(f"callable returned shape {vals.shape}, expected ({self.n},)")
        return vals

    # -------------------------------------------------------------- assembly
    def matrix_from_data(self, data: np.ndarray) -> sp.csr_matrix:
        """Wrap a data array over the canonical pattern as a CSR matrix."""
        if data.shape != (self.nnz,):
            raise FemError(f"data has shape {data.shape}, pattern holds {self.nnz} entries")
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def scatter(self, local: np.ndarray) -> np.ndarray:
        """Accumulate per-element local matrices (E, k, k) into pattern data."""
        return np.bincount(self._slots, weights=local.ravel(), minlength=self.nnz)

    def scatter_constant(self, local: np.ndarray) -> np.ndarray:
        """Accumulate one local matrix shared by every element into pattern data."""
        tiled = np.broadcast_to(local, (self.n_elements,) + local.shape)
        return np.bincount(self._slots, weights=tiled.ravel(), minlength=self.nnz)

    def weighted_mass_data(self, quad_values: np.ndarray) -> np.ndarray:
        """Pattern data of a mass matrix weighted by values at quadrature points."""
        if quad_values.shape != (self.n_elements, self.n_quad):
            raise FemError(
                f"quadrature values must have shape ({self.n_elements}, {self.n_quad})"
            )
        local = np.einsum(
            "eq,qij->eij", quad_values * self.quad_weights[None, :], self._basis_outer
        )
        return self.scatter(local)

    # ------------------------------------------------------- reduced vectors
    def expand(self, reduced: np.ndarray) -> np.ndarray:
        """Zero-pad constrained entries back in; identity under natural conditions."""
        reduced = np.asarray(reduced, dtype=float)
        if self.bc == "natural":
            return reduced
        shape = (self.n,) + reduced.shape[1:]
        full = np.zeros(shape)
        full[self.free] = reduced
        return full


def build_space(domain, h, bc: str = "natural") -> FemSpace:
    """Build a uniform quadratic FE space on an interval or rectangle."""
    return FemSpace(domain, h, bc)


def assemble_mass(space: FemSpace) -> sp.csr_matrix:
    """Mass matrix on the full node set."""
    return space.matrix_from_data(space.scatter_constant(space._local_mass))


def assemble_stiffness(space: FemSpace) -> sp.csr_matrix:
    """Stiffness (weak Laplacian) matrix on the full node set."""
    return space.matrix_from_data(space.scatter_constant(space._local_stiffness))


def _weight_to_quad_values(space: FemSpace, weight) -> np.ndarray:
    if callable(weight):
        pts = space.quad_points()
        flat = pts.reshape(-1, space.dim)
        arg = flat[:, 0] if space.dim == 1 else flat
        vals = np.asarray(weight(arg), dtype=float)
        if vals.shape != (flat.shape[0],):
            raise FemError(
                f"weight callable returned shape {vals.shape}, expected ({flat.shape[0]},)"
            )
        return vals.reshape(space.n_elements, space.n_quad)
    if isinstance(weight, (tuple, list)):
        if len(weight) != 2:
            raise FemError("pair weight must contain exactly two coefficient vectors")
        return space.evaluate(np.asarray(weight[0])) * space.evaluate(np.asarray(weight[1]))
    arr = np.asarray(weight, dtype=float)
    if arr.shape == (space.n,):
        return space.evaluate(arr)
    if arr.shape == (space.n_elements, space.n_quad):
        return arr
    raise FemError(
        "weight must be a callable, a nodal coefficient vector, a pair of them, "
        f"or precomputed quadrature values; got shape {arr.shape}"
    )


def assemble_weighted_mass(space: FemSpace, weight) -> sp.csr_matrix:
    """Mass matrix weighted pointwise by a function.

    ``weight`` may be a callable of physical coordinates, a full-length nodal
    coefficient vector (the FE function it represents is the weight), a pair of
    such vectors (their pointwise product is the weight), or an array of values
    at quadrature points with shape (n_elements, n_quad).
    """
    return space.matrix_from_data(space.weighted_mass_data(_weight_to_quad_values(space, weight)))


def constrain_dirichlet(space: FemSpace, obj):
    """Restrict a matrix or full-length vector/block to the unconstrained nodes."""
    if space.bc != "dirichlet":
        raise FemError("constrain_dirichlet requires a space built with bc='dirichlet'")
    if sp.issparse(obj):
        return obj[space.free][:, space.free].tocsr()
    arr = np.asarray(obj)
    if arr.shape[0] != space.n:
        raise FemError(f"vector length {arr.shape[0]} does not match node count {space.n}")
    return arr[space.free].copy()
