"""
Tests for nodal/box fields and the discrete norms.
"""
import numpy as np
import pytest

from src.fields.norms import (
    BoxField,
    NodalField,
    box_triple_norm,
    extend_pressure,
    field_frame,
    h1_seminorm,
    integrate_over_boxes,
    interpolate,
    l2_norm,
    l2_norm_box,
    lump,
    lumping_defect,
    lumping_error,
    p1_mass,
    p1_stiffness,
    star_seminorm,
    tri_star_seminorm,
)


def test_nodal_field_validation(coarse_dual):
    """Wrong sizes and non-finite values are rejected."""
    with pytest.raises(ValueError):
        NodalField(np.zeros(3), coarse_dual)
    values = np.zeros(coarse_dual.parent.n_vertices)
    values[0] = np.nan
    with pytest.raises(ValueError):
        NodalField(values, coarse_dual)
    with pytest.raises(ValueError):
        BoxField(np.zeros(coarse_dual.n_boxes + 1), coarse_dual)


def test_field_arithmetic(coarse_dual):
    n = coarse_dual.parent.n_vertices
    a = NodalField(np.ones(n), coarse_dual)
    b = a.scaled(3.0)
    np.testing.assert_allclose((b - a).values, 2.0)
    np.testing.assert_allclose((a + b).values, 4.0)


def test_interpolate_scalar_and_vector(coarse_dual):
    """Scalar functions give one field, vector functions a list."""
    q = interpolate(lambda x: x[:, 0], coarse_dual)
    assert isinstance(q, NodalField)
    np.testing.assert_array_equal(q.values, coarse_dual.parent.vertices[:, 0])
    v = interpolate(lambda x: x, coarse_dual)
    assert len(v) == 2


def test_h1_and_l2_of_linear_field(jittered_dual):
    """Exact norms of x on [-1/4, 1/4]^2."""
    q = interpolate(lambda x: x[:, 0], jittered_dual)
    assert h1_seminorm(q) == pytest.approx(0.5, rel=1e-12)
    assert l2_norm(q) == pytest.approx(np.sqrt(0.5 * 2 * 0.25 ** 3 / 3), rel=1e-12)
    assert l2_norm(interpolate(lambda x: np.ones(len(x)), jittered_dual)) == pytest.approx(0.5)


def test_vector_norms_add(coarse_dual):
    """Vector norms are the root sum of squares of the components."""
    v = interpolate(lambda x: np.column_stack([x[:, 0], 2.0 * x[:, 1]]), coarse_dual)
    expected = np.sqrt(h1_seminorm(v[0]) ** 2 + h1_seminorm(v[1]) ** 2)
    assert h1_seminorm(v) == pytest.approx(expected)


def test_star_seminorm(jittered_dual):
    """Constants have zero *-seminorm; the seminorm is homogeneous."""
    n = jittered_dual.parent.n_vertices
    assert star_seminorm(NodalField(np.full(n, 2.0), jittered_dual)) == 0.0
    rng = np.random.default_rng(0)
    q = NodalField(rng.standard_normal(n), jittered_dual)
    assert star_seminorm(q.scaled(-3.0)) == pytest.approx(3.0 * star_seminorm(q))


def test_star_of_linear_field(coarse_dual):
    """For q = x the *-seminorm is the face sum of d |F| n_x^2."""
    q = interpolate(lambda x: x[:, 0], coarse_dual)
    expected = np.sum(coarse_dual.d_ij * coarse_dual.area * coarse_dual.normal[:, 0] ** 2)
    assert star_seminorm(q) ** 2 == pytest.approx(expected, rel=1e-12)


def test_star_matches_h1_for_p1(jittered_dual):
    """On fields vanishing at the boundary, |q|_* equals the H1 seminorm."""
    rng = np.random.default_rng(1)
    values = rng.standard_normal(jittered_dual.parent.n_vertices)
    values[jittered_dual.parent.boundary] = 0.0
    q = NodalField(values, jittered_dual)
    assert star_seminorm(q) == pytest.approx(h1_seminorm(q), rel=1e-10)


def test_tri_star_is_weighted(coarse_dual):
    """The triangle-weighted seminorm is bounded by h^(3/2) |q|_*."""
    rng = np.random.default_rng(2)
    q = NodalField(rng.standard_normal(coarse_dual.parent.n_vertices), coarse_dual)
    assert tri_star_seminorm(q) <= coarse_dual.parent.h ** 1.5 * star_seminorm(q) * (1 + 1e-12)


def test_lump_and_box_norm(coarse_dual):
    """Lumping samples generators; the box L2 norm of one is sqrt of the box volume."""
    q = interpolate(lambda x: x[:, 1], coarse_dual)
    np.testing.assert_array_equal(lump(q).values, coarse_dual.generators[:, 1])
    ones = BoxField(np.ones(coarse_dual.n_boxes), coarse_dual)
    assert l2_norm_box(ones) == pytest.approx(np.sqrt(coarse_dual.volumes.sum()))


def test_box_triple_norm(coarse_dual):
    """The triple norm dominates each of its parts and vanishes on zero."""
    n = coarse_dual.parent.n_vertices
    zero = NodalField(np.zeros(n), coarse_dual)
    assert box_triple_norm([zero, zero], zero) == 0.0
    v = interpolate(lambda x: np.column_stack([np.sin(x[:, 0]), x[:, 1] ** 2]), coarse_dual)
    q = interpolate(lambda x: np.cos(4 * x[:, 0]), coarse_dual)
    value = box_triple_norm(v, q)
    assert value >= h1_seminorm(v)
    assert value >= l2_norm_box(lump(q))


def test_extend_pressure_constant(coarse_dual):
    """Constant box values extend to a constant nodal field."""
    p = extend_pressure(coarse_dual, np.full(coarse_dual.n_boxes, 1.5))
    np.testing.assert_allclose(p.values, 1.5)


def test_extend_pressure_keeps_boxes(coarse_dual):
    rng = np.random.default_rng(3)
    values = rng.standard_normal(coarse_dual.n_boxes)
    p = extend_pressure(coarse_dual, values)
    np.testing.assert_array_equal(p.values[coarse_dual.box_vertex], values)


def test_extend_pressure_linear(jittered_dual):
    """Linear box values extend exactly to every boundary vertex facing a box."""
    x = jittered_dual.parent.vertices
    exact = 0.3 + 2.0 * x[:, 0] - 1.5 * x[:, 1]
    p = extend_pressure(jittered_dual, exact[jittered_dual.box_vertex])
    facing = np.unique(jittered_dual.face_vertex[jittered_dual.boundary_faces, 1])
    assert len(facing) > 0
    np.testing.assert_allclose(p.values[facing], exact[facing], atol=1e-12)


def test_lumping_constant(jittered_dual):
    """Lumping is exact on constants."""
    q = NodalField(np.full(jittered_dual.parent.n_vertices, 2.0), jittered_dual)
    assert np.max(np.abs(lumping_defect(q))) < 1e-14
    assert np.max(lumping_error(q)) < 1e-7


def test_lumping_error_positive(jittered_dual):
    """Non-constant fields have a positive lumping error."""
    q = interpolate(lambda x: x[:, 0], jittered_dual)
    err = lumping_error(q)
    assert err.shape == (jittered_dual.parent.n_cells,)
    assert err.sum() > 0


def test_integrate_over_boxes(jittered_dual):
    """Integrating one gives the box volumes; vector integrands give columns."""
    np.testing.assert_allclose(integrate_over_boxes(lambda x: np.ones(len(x)), jittered_dual),
                               jittered_dual.volumes, rtol=1e-10)
    moments = integrate_over_boxes(lambda x: x, jittered_dual)
    np.testing.assert_allclose(moments / jittered_dual.volumes[:, None], jittered_dual.centroids, atol=1e-12)


def test_p1_matrices(jittered_dual):
    """P1 stiffness and mass reproduce the exact norms."""
    primal = jittered_dual.parent
    x = primal.vertices[:, 0]
    K = p1_stiffness(primal)
    M = p1_mass(primal)
    assert np.max(np.abs(K @ np.ones(primal.n_vertices))) < 1e-12
    assert x @ (K @ x) == pytest.approx(0.25, rel=1e-12)
    assert np.ones(primal.n_vertices) @ (M @ np.ones(primal.n_vertices)) == pytest.approx(0.25, rel=1e-12)
    assert np.sqrt(x @ (M @ x)) == pytest.approx(l2_norm(interpolate(lambda p: p[:, 0], jittered_dual)))


def test_field_frame(coarse_dual):
    """Field tables carry coordinates, boundary flags and one column per field."""
    q = interpolate(lambda x: x[:, 0], coarse_dual)
    frame = field_frame({"q": q})
    assert list(frame.columns) == ["vertex", "x", "y", "boundary", "q"]
    assert len(frame) == coarse_dual.parent.n_vertices
    with pytest.raises(ValueError):
        field_frame({})
