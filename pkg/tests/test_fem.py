"""Element matrices, assembly determinism, and boundary handling."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gpeopt.fem import (
    FemError,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_mass,
    build_space,
    constrain_dirichlet,
)

# Frozen reference values, computed once by exact symbolic integration of the
# quadratic nodal basis on a single [0, 1] element.
MASS_REF = np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0
STIFF_REF = np.array([[7.0, -8.0, 1.0], [-8.0, 16.0, -8.0], [1.0, -8.0, 7.0]]) / 3.0
WMASS_X_REF = np.array([[1.0, 0.0, -1.0], [0.0, 16.0, 4.0], [-1.0, 4.0, 7.0]]) / 60.0
MASS_ROW_SUMS = np.array([1.0, 4.0, 1.0]) / 6.0


def test_single_element_mass_matches_frozen_value():
    space = build_space((0.0, 1.0), 1.0)
    M = assemble_mass(space).toarray()
    assert_allclose(M, MASS_REF, rtol=0, atol=1e-15)
    assert_allclose(M.sum(axis=1), MASS_ROW_SUMS, rtol=0, atol=1e-15)


def test_single_element_stiffness_matches_frozen_value():
    space = build_space((0.0, 1.0), 1.0)
    S = assemble_stiffness(space).toarray()
    assert_allclose(S, STIFF_REF, rtol=0, atol=1e-13)


def test_element_size_scaling():
    h = 0.37
    space = build_space((0.0, h), h)
    assert_allclose(assemble_mass(space).toarray(), h * MASS_REF, rtol=1e-14)
    assert_allclose(assemble_stiffness(space).toarray(), STIFF_REF / h, rtol=1e-13)


def test_single_element_weighted_mass_matches_frozen_value():
    space = build_space((0.0, 1.0), 1.0)
    W = assemble_weighted_mass(space, lambda x: x).toarray()
    assert_allclose(W, WMASS_X_REF, rtol=0, atol=1e-15)


def test_2d_element_matrices_are_tensor_products():
    space = build_space(((0.0, 1.0), (0.0, 1.0)), 1.0)
    M = assemble_mass(space).toarray()
    S = assemble_stiffness(space).toarray()
    assert_allclose(M, np.kron(MASS_REF, MASS_REF), atol=1e-15)
    assert_allclose(S, np.kron(MASS_REF, STIFF_REF) + np.kron(STIFF_REF, MASS_REF), atol=1e-13)


def test_mass_partition_of_unity():
    for domain, h, volume in [
        ((-16.0, 16.0), 0.5, 32.0),
        (((0.0, 1.0), (0.0, 2.0)), (0.25, 0.5), 2.0),
    ]:
        space = build_space(domain, h)
        M = assemble_mass(space)
        ones = np.ones(space.n)
        assert abs(ones @ (M @ ones) - volume) < 1e-12 * volume


def test_stiffness_annihilates_constants_and_integrates_gradients():
    space = build_space((0.0, 1.0), 0.125)
    S = assemble_stiffness(space)
    ones = np.ones(space.n)
    assert np.max(np.abs(S @ ones)) < 1e-12
    u = space.nodes[:, 0]
    assert abs(u @ (S @ u) - 1.0) < 1e-12

    space2 = build_space(((0.0, 1.0), (0.0, 1.0)), 0.25)
    S2 = assemble_stiffness(space2)
    u2 = space2.nodes[:, 0]
    assert abs(u2 @ (S2 @ u2) - 1.0) < 1e-12


def test_matrices_share_canonical_pattern_and_are_symmetric():
    space = build_space(((0.0, 1.0), (0.0, 1.0)), 0.25)
    M = assemble_mass(space)
    S = assemble_stiffness(space)
    W = assemble_weighted_mass(space, lambda p: 1.0 + p[:, 0] * p[:, 1])
    assert np.array_equal(M.indices, S.indices) and np.array_equal(M.indptr, S.indptr)
    assert np.array_equal(M.indices, W.indices)
    for mat in (M, S, W):
        diff = mat - mat.T
        assert np.max(np.abs(diff.data)) < 1e-14 if diff.nnz else True


def test_assembly_is_bitwise_deterministic():
    space = build_space((-2.0, 2.0), 0.25)
    w = np.cos(space.nodes[:, 0])
    a = assemble_weighted_mass(space, w)
    b = assemble_weighted_mass(space, w)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(assemble_stiffness(space).data, assemble_stiffness(space).data)


def test_weighted_mass_constant_weight_equals_mass():
    space = build_space((0.0, 3.0), 0.5)
    M = assemble_mass(space)
    W = assemble_weighted_mass(space, lambda x: np.ones_like(x))
    assert_allclose(W.toarray(), M.toarray(), rtol=0, atol=1e-15)


def test_weighted_mass_nodal_vector_matches_callable_for_quadratics():
    space = build_space((0.0, 2.0), 0.25)
    f = lambda x: 1.0 + 0.5 * x + 0.25 * x**2
    via_callable = assemble_weighted_mass(space, f)
    via_coeffs = assemble_weighted_mass(space, space.interpolate(f))
    assert_allclose(via_coeffs.toarray(), via_callable.toarray(), rtol=0, atol=1e-14)


def test_weighted_mass_pair_weight_is_product():
    space = build_space((0.0, 1.0), 0.25)
    u = space.interpolate(lambda x: 1.0 + x)
    v = space.interpolate(lambda x: 2.0 - x)
    pair = assemble_weighted_mass(space, (u, v))
    prod = assemble_weighted_mass(space, lambda x: (1.0 + x) * (2.0 - x))
    assert_allclose(pair.toarray(), prod.toarray(), rtol=0, atol=1e-14)


def test_mass_is_positive_definite_and_stiffness_semidefinite():
    space = build_space(((0.0, 1.0), (0.0, 1.0)), 0.5)
    M = assemble_mass(space).toarray()
    S = assemble_stiffness(space).toarray()
    assert np.linalg.eigvalsh(M).min() > 0
    assert np.linalg.eigvalsh(S).min() > -1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_mass_quadratic_form_positive(seed):
    space = build_space((0.0, 1.0), 0.25)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(space.n)
    M = assemble_mass(space)
    if np.linalg.norm(u) > 0:
        assert u @ (M @ u) > 0


@settings(max_examples=20, deadline=None)
@given(
    st.floats(min_value=-2.0, max_value=2.0),
    st.floats(min_value=-2.0, max_value=2.0),
    st.floats(min_value=-2.0, max_value=2.0),
)
def test_quadratics_are_reproduced_at_quadrature_points(a, b, c):
    space = build_space((-1.0, 2.0), 0.75)
    f = lambda x: a + b * x + c * x**2
    vals = space.evaluate(space.interpolate(f))
    pts = space.quad_points()[:, :, 0]
    assert_allclose(vals, f(pts), rtol=0, atol=1e-12)


def test_dirichlet_reduction():
    space = build_space((0.0, 1.0), 0.25, bc="dirichlet")
    assert space.n_free == space.n - 2
    M = assemble_mass(space)
    Mr = constrain_dirichlet(space, M)
    assert Mr.shape == (space.n_free, space.n_free)
    dense = M.toarray()[np.ix_(space.free, space.free)]
    assert_allclose(Mr.toarray(), dense, rtol=0, atol=0)
    v = np.arange(space.n, dtype=float)
    assert np.array_equal(constrain_dirichlet(space, v), v[space.free])

    space2 = build_space(((0.0, 1.0), (0.0, 1.0)), 0.5, bc="dirichlet")
    assert space2.n_free == (space2.n - np.count_nonzero(space2.boundary_mask))
    assert np.count_nonzero(space2.boundary_mask) == 4 * 4


def test_expand_round_trip():
    space = build_space((0.0, 1.0), 0.25, bc="dirichlet")
    v = np.linspace(1.0, 2.0, space.n_free)
    full = space.expand(v)
    assert full.shape == (space.n,)
    assert np.array_equal(full[space.free], v)
    assert full[0] == 0.0 and full[-1] == 0.0


def test_constrain_requires_dirichlet_space():
    space = build_space((0.0, 1.0), 0.25)
    with pytest.raises(FemError):
        constrain_dirichlet(space, assemble_mass(space))


def test_mesh_validation_errors():
    with pytest.raises(FemError):
        build_space((0.0, 1.0), 0.3)  # not commensurate
    with pytest.raises(FemError):
        build_space((1.0, 0.0), 0.25)  # inverted interval
    with pytest.raises(FemError):
        build_space((0.0, 1.0), -0.25)
    with pytest.raises(FemError):
        build_space((0.0, 1.0), 0.25, bc="periodic")
    with pytest.raises(FemError):
        build_space((0.0, 1.0), 2.0**-28)  # exceeds entry capacity


def test_node_ordering_is_x_fastest():
    space = build_space(((0.0, 1.0), (10.0, 12.0)), (0.5, 1.0))
    nx = 2 * space.cells[0] + 1
    assert_allclose(space.nodes[:nx, 1], 10.0)
    assert_allclose(space.nodes[1, 0] - space.nodes[0, 0], 0.25)
    assert_allclose(space.nodes[nx, 1] - space.nodes[0, 1], 0.5)
