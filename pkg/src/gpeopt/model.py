"""Continuous problem descriptions: interaction matrices, potentials, validation.

A :class:`ProblemSpec` fixes the physics (domain, component count, particle
numbers, interaction matrix, external potentials, boundary handling) and is
immutable after construction.  :func:`validate` checks the standing model
assumptions — potentials nonnegative, interaction matrix symmetric positive
definite, masses positive — and :func:`evaluate_potentials` produces the
deterministic nodal/quadrature potential fields used by assembly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .fem import FemSpace

__all__ = [
    "InteractionMatrix",
    "ModelError",
    "PotentialFields",
    "PotentialSpec",
    "ProblemSpec",
    "ValidationReport",
    "evaluate_potentials",
    "read_potential_file",
    "require_valid",
    "validate",
    "write_potential_file",
]

POTENTIAL_KINDS = ("expression", "piecewise_random", "piecewise_periodic", "nodal_file")


class ModelError(ValueError):
    """Raised for ill-posed problem descriptions."""


class InteractionMatrix:
    """Symmetric positive-definite matrix of pairwise interaction strengths."""

    def __init__(self, kappa):
        arr = np.asarray(kappa, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise ModelError(f"interaction matrix must be square, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ModelError("interaction matrix contains non-finite entries")
        self.kappa = arr
        self.kappa.setflags(write=False)

    @property
    def p(self) -> int:
        return self.kappa.shape[0]

    @property
    def is_symmetric(self) -> bool:
        return np.array_equal(self.kappa, self.kappa.T)

    @property
    def nonneg_entries(self) -> bool:
        return bool((self.kappa >= 0).all())

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.kappa + self.kappa.T)).min())

    def __repr__(self) -> str:
        return f"InteractionMatrix({self.kappa.tolist()})"


@dataclass(frozen=True)
class PotentialSpec:
    """One component's external potential.

    ``kind`` selects the model:

    - ``"expression"``: harmonic * |x|^2 + lattice_amplitude * sum_d cos^2(lattice_frequency * x_d)
    - ``"piecewise_random"``: constant on axis-aligned cells of size ``cell_size``;
      each cell independently takes ``value_high`` with ``probability`` (else 0),
      drawn from a seeded 64-bit generator.
    - ``"piecewise_periodic"``: same cells, deterministic alternation — cells whose
      index parity sum is even take ``value_high``, the rest 0.
    - ``"nodal_file"``: one value per mesh node read from ``path``.

    Any kind may add a confinement term
    ``trap_strength * max_d s_d^trap_power`` with ``s_d`` the coordinate mapped
    affinely onto [-1, 1]; ``trap_power`` must be even so the term is nonnegative.
    """

    kind: str = "expression"
    harmonic: float = 0.0
    lattice_amplitude: float = 0.0
    lattice_frequency: float = 1.0
    cell_size: float = 0.0
    value_high: float = 0.0
    probability: float = 0.5
    seed: int = 0
    path: str | None = None
    trap_strength: float = 0.0
    trap_power: int = 40

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ModelError(f"unknown potential kind {self.kind!r}; choose from {POTENTIAL_KINDS}")
        if self.kind in ("piecewise_random", "piecewise_periodic") and self.cell_size <= 0:
            raise ModelError(f"{self.kind} potential requires a positive cell_size")
        if self.kind == "piecewise_random" and not (0.0 <= self.probability <= 1.0):
            raise ModelError("probability must lie in [0, 1]")
        if self.kind == "nodal_file" and not self.path:
            raise ModelError("nodal_file potential requires a path")
        if self.trap_power % 2 != 0 or self.trap_power < 2:
            raise ModelError("trap_power must be a positive even integer")


@dataclass(frozen=True)
class ProblemSpec:
    """Full description of a coupled ground-state problem."""

    domain: tuple
    masses: tuple
    interaction: InteractionMatrix
    potentials: tuple
    bc: str = "natural"

    def __post_init__(self):
        dom = np.asarray(self.domain, dtype=float)
        if dom.shape == (2,):
            dom = dom[None, :]
        if dom.ndim != 2 or dom.shape[1] != 2 or dom.shape[0] not in (1, 2):
            raise ModelError(f"domain must be one or two (lo, hi) intervals, got {self.domain!r}")
        object.__setattr__(self, "domain", tuple((float(a), float(b)) for a, b in dom))
        masses = tuple(float(m) for m in np.atleast_1d(self.masses))
        object.__setattr__(self, "masses", masses)
        if not isinstance(self.interaction, InteractionMatrix):
            object.__setattr__(self, "interaction", InteractionMatrix(self.interaction))
        pots = self.potentials
        if isinstance(pots, PotentialSpec):
            pots = (pots,)
        object.__setattr__(self, "potentials", tuple(pots))
        if self.bc not in ("natural", "dirichlet"):
            raise ModelError(f"bc must be 'natural' or 'dirichlet', got {self.bc!r}")
        if len(self.masses) != self.p or len(self.potentials) != self.p:
            raise ModelError(
                f"component count mismatch: {len(self.masses)} masses, "
                f"{len(self.potentials)} potentials, interaction is {self.p}x{self.p}"
            )

    @property
    def dim(self) -> int:
        return len(self.domain)

    @property
    def p(self) -> int:
        return self.interaction.p


@dataclass
class ValidationReport:
    """Outcome of the model-assumption checks."""

    a1_ok: bool
    a2_ok: bool
    nonneg_K: bool
    delta_misc: float | None
    warnings: list
    errors: list

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass
class PotentialFields:
    """Deterministic potential samples: per component, at nodes and quad points."""

    nodal: np.ndarray  # (p, n)
    quad: np.ndarray  # (p, n_elements, n_quad)


# ----------------------------------------------------------------- evaluation
def _as_points(points, dim: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if dim == 1:
        return pts.reshape(-1, 1)
    return pts.reshape(-1, dim)


def _cell_counts(spec: PotentialSpec, domain) -> tuple:
    counts = []
    for lo, hi in domain:
        ratio = (hi - lo) / spec.cell_size
        m = int(round(ratio))
        if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
            raise ModelError(
                f"cell_size {spec.cell_size} does not tile the axis ({lo}, {hi}) evenly"
            )
        counts.append(m)
    return tuple(counts)


def _cell_indices(pts: np.ndarray, domain, cell: float, counts) -> list:
    idx = []
    for d, (lo, _hi) in enumerate(domain):
        i = np.floor((pts[:, d] - lo) / cell).astype(np.int64)
        idx.append(np.clip(i, 0, counts[d] - 1))
    return idx


def _trap_values(spec: PotentialSpec, pts: np.ndarray, domain) -> np.ndarray:
    if spec.trap_strength == 0.0:
        return np.zeros(pts.shape[0])
    powers = np.empty_like(pts)
    for d, (lo, hi) in enumerate(domain):
        s = 2.0 * (pts[:, d] - lo) / (hi - lo) - 1.0
        powers[:, d] = s**spec.trap_power
    return spec.trap_strength * powers.max(axis=1)


def potential_values(spec: PotentialSpec, points, domain, nodal_data=None) -> np.ndarray:
    """Evaluate one potential at arbitrary physical points (flat array)."""
    domain = tuple(domain)
    pts = _as_points(points, len(domain))
    if spec.kind == "expression":
        vals = spec.harmonic * (pts**2).sum(axis=1)
        if spec.lattice_amplitude != 0.0:
            vals = vals + spec.lattice_amplitude * (
                np.cos(spec.lattice_frequency * pts) ** 2
            ).sum(axis=1)
    elif spec.kind in ("piecewise_random", "piecewise_periodic"):
        counts = _cell_counts(spec, domain)
        idx = _cell_indices(pts, domain, spec.cell_size, counts)
        if spec.kind == "piecewise_periodic":
            parity = sum(idx) % 2
            vals = np.where(parity == 0, spec.value_high, 0.0)
        else:
            rng = np.random.default_rng(spec.seed)
            table = rng.random(counts) < spec.probability
            vals = np.where(table[tuple(idx)], spec.value_high, 0.0)
    elif spec.kind == "nodal_file":
        raise ModelError("file-backed potentials are evaluated through a FE space")
    else:  # pragma: no cover - guarded in __post_init__
        raise ModelError(f"unknown potential kind {spec.kind!r}")
    return vals + _trap_values(spec, pts, domain)


def read_potential_file(path: str) -> np.ndarray:
    """Read a nodal potential file: '#'-prefixed header lines, one value per node."""
    values = []
    declared = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                compact = line[1:].replace(" ", "")
                if "n=" in compact:
                    declared = int(compact.split("n=")[1])
                continue
            values.append(float(line))
    arr = np.asarray(values, dtype=float)
    if declared is not None and declared != len(arr):
        raise ModelError(
            f"potential file {path} declares n={declared} but holds {len(arr)} values"
        )
    return arr


def write_potential_file(path: str, values: np.ndarray) -> None:
    """Write a nodal potential file in mesh node order."""
    values = np.asarray(values, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={len(values)}\n")
        for v in values:
            fh.write(f"{v:.16e}\n")


def evaluate_potentials(problem: ProblemSpec, space: FemSpace) -> PotentialFields:
    """Per-component potential values at mesh nodes and quadrature points.

    Analytic and piecewise kinds are evaluated exactly at the quadrature
    points; file-backed potentials are interpolated from their nodal values.
    Raises :class:`ModelError` if any quadrature sample is negative (the model
    requires nonnegative potentials) or a file's length mismatches the mesh.
    """
    nodal = np.empty((problem.p, space.n))
    quad = np.empty((problem.p, space.n_elements, space.n_quad))
    qpts = space.quad_points().reshape(-1, space.dim)
    for j, spec in enumerate(problem.potentials):
        if spec.kind == "nodal_file":
            data = read_potential_file(spec.path)
            if data.shape != (space.n,):
                raise ModelError(
                    f"potential file {spec.path} holds {data.shape[0]} values, "
                    f"mesh has {space.n} nodes"
                )
            base = data + _trap_values(spec, space.nodes, problem.domain)
            nodal[j] = base
            quad[j] = space.evaluate(base)
        else:
            nodal[j] = potential_values(spec, space.nodes, problem.domain)
            quad[j] = potential_values(spec, qpts, problem.domain).reshape(
                space.n_elements, space.n_quad
            )
        scale = max(1.0, float(np.max(np.abs(quad[j]))))
        if quad[j].min() < -1e-12 * scale:
            raise ModelError(
                f"potential {j} is negative at a quadrature point "
                f"(min {quad[j].min():.3e}); the model requires V >= 0"
            )
        np.clip(quad[j], 0.0, None, out=quad[j])
    return PotentialFields(nodal=nodal, quad=quad)


# ----------------------------------------------------------------- validation
def _probe_points(problem: ProblemSpec, per_axis: int = 129) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in problem.domain]
    if problem.dim == 1:
        return axes[0].reshape(-1, 1)
    xg, yg = np.meshgrid(axes[0], axes[1], indexing="xy")
    return np.column_stack([xg.ravel(), yg.ravel()])


def validate(problem: ProblemSpec, space: FemSpace | None = None) -> ValidationReport:
    """Check the standing model assumptions; pure, no state mutation.

    Hard errors (solver must refuse): asymmetric or non-positive-definite
    interaction matrix, nonpositive masses, negative potential samples.
    A nonpositive miscibility indicator is only a warning.
    """
    errors: list = []
    warnings: list = []
    K = problem.interaction

    if not K.is_symmetric:
        errors.append("interaction matrix is not symmetric")
    min_eig = K.min_eigenvalue
    a2_ok = K.is_symmetric and min_eig > 0
    if K.is_symmetric and min_eig <= 0:
        errors.append(
            f"interaction matrix is not positive definite (smallest eigenvalue {min_eig:.3e})"
        )

    for j, m in enumerate(problem.masses):
        if not m > 0:
            errors.append(f"mass {j} must be positive, got {m}")

    a1_ok = True
    try:
        if space is not None:
            evaluate_potentials(problem, space)
        else:
            pts = _probe_points(problem)
            for j, spec in enumerate(problem.potentials):
                if spec.kind == "nodal_file":
                    continue  # checked against a concrete mesh at assembly time
                vals = potential_values(spec, pts, problem.domain)
                scale = max(1.0, float(np.max(np.abs(vals))))
                if vals.min() < -1e-12 * scale:
                    raise ModelError(f"potential {j} takes negative sample values")
    except ModelError as exc:
        a1_ok = False
        errors.append(str(exc))

    delta_misc = None
    if problem.p == 2 and K.kappa[0, 1] != 0.0:
        delta_misc = float(K.kappa[0, 0] * K.kappa[1, 1] / K.kappa[0, 1] ** 2 - 1.0)
        if delta_misc <= 0:
            warnings.append(
                f"miscibility indicator {delta_misc:.4f} <= 0: components may segregate"
            )

    return ValidationReport(
        a1_ok=a1_ok,
        a2_ok=a2_ok,
        nonneg_K=K.nonneg_entries,
        delta_misc=delta_misc,
        warnings=warnings,
        errors=errors,
    )


def require_valid(problem: ProblemSpec, space: FemSpace | None = None) -> ValidationReport:
    """Validate and raise :class:`ModelError` if any hard check fails."""
    report = validate(problem, space)
    if not report.ok:
        raise ModelError("; ".join(report.errors))
    return report
