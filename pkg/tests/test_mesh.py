import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrecon.mesh import (
    FeFunction,
    build_mesh,
    evaluate,
    interpolate,
    mesh_from_text,
    mesh_to_text,
    monomial_integral,
    quadrature_for_degree,
)


def test_interval_mesh_64():
    mesh = build_mesh(1, 64)
    assert mesh.h == pytest.approx(1.5625e-2, rel=1e-15)
    assert mesh.n_vertices == 65
    np.testing.assert_allclose(mesh.vertices[:, 0], np.arange(65) / 64, atol=1e-15)


def test_square_mesh_10():
    mesh = build_mesh(2, 10)
    assert mesh.h == pytest.approx(math.sqrt(2) / 10)
    assert round(mesh.h, 3) == 0.141
    assert mesh.n_vertices == 121
    assert mesh.n_cells == 200


def test_smallest_interval_mesh():
    mesh = build_mesh(1, 2)
    np.testing.assert_array_equal(mesh.vertices[:, 0], [0.0, 0.5, 1.0])
    assert set(mesh.boundary_nodes.tolist()) == {0, 2}


@pytest.mark.parametrize("dim", [1, 2])
def test_rejects_single_subdivision(dim):
    with pytest.raises(ValueError):
        build_mesh(dim, 1)


@pytest.mark.parametrize("dim,n", [(1, 7), (2, 5), (2, 12)])
def test_mesh_invariants(dim, n):
    mesh = build_mesh(dim, n)
    assert np.all(mesh.cell_measures > 0)
    assert mesh.cells.min() >= 0 and mesh.cells.max() < mesh.n_vertices
    on_bnd = np.any((mesh.vertices == 0.0) | (mesh.vertices == 1.0), axis=1)
    np.testing.assert_array_equal(np.flatnonzero(on_bnd), mesh.boundary_nodes)
    assert abs(mesh.cell_measures.sum() - 1.0) <= 1e-13
    edges = mesh.vertices[mesh.cells][:, :, None, :] - mesh.vertices[mesh.cells][:, None, :, :]
    assert np.linalg.norm(edges, axis=-1).max() == pytest.approx(mesh.h, rel=1e-14)


def test_mesh_is_deterministic():
    a, b = build_mesh(2, 6), build_mesh(2, 6)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.cells, b.cells)


def test_mesh_arrays_are_read_only():
    mesh = build_mesh(2, 3)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 1.0


def test_text_round_trip():
    mesh = build_mesh(2, 4)
    back = mesh_from_text(mesh_to_text(mesh))
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.cells, mesh.cells)
    np.testing.assert_array_equal(back.boundary_nodes, mesh.boundary_nodes)
    assert back.h == mesh.h


# --- quadrature -------------------------------------------------------

def _integrate_monomial(rule, exps):
    # barycentric monomial prod(lambda_k ** e_k) over the reference simplex
    vals = np.prod(rule.points ** np.asarray(exps), axis=1)
    return float(rule.weights @ vals)


def test_midpoint_rule_integrates_x():
    rule = quadrature_for_degree(1, 1)
    assert _integrate_monomial(rule, (0, 1)) == pytest.approx(0.5, abs=1e-15)


def test_triangle_rule_lambda1_lambda2():
    rule = quadrature_for_degree(2, 2)
    assert _integrate_monomial(rule, (0, 1, 1)) == pytest.approx(1 / 24, abs=1e-15)


def test_gauss_rule_x5():
    rule = quadrature_for_degree(1, 5)
    assert _integrate_monomial(rule, (0, 5)) == pytest.approx(1 / 6, abs=1e-15)


@pytest.mark.parametrize("dim", [1, 2])
@pytest.mark.parametrize("degree", range(0, 12))
def test_quadrature_exactness(dim, degree):
    rule = quadrature_for_degree(dim, degree)
    assert rule.exact_degree >= degree
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(rule.reference_measure, abs=1e-15)
    for total in range(degree + 1):
        for exps in _compositions(total, dim + 1):
            exact = monomial_integral(exps)
            assert _integrate_monomial(rule, exps) == pytest.approx(exact, rel=1e-12, abs=1e-15)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for k in range(total + 1):
        for rest in _compositions(total - k, parts - 1):
            yield (k,) + rest


@pytest.mark.parametrize("dim,n", [(1, 9), (2, 7)])
def test_partition_of_unity(dim, n):
    mesh = build_mesh(dim, n)
    rule = quadrature_for_degree(dim, 5)
    ones = FeFunction(mesh, np.ones(mesh.n_vertices))
    np.testing.assert_allclose(ones.at(rule), 1.0, atol=1e-13)
    np.testing.assert_allclose(rule.points.sum(axis=1), 1.0, atol=1e-15)


# --- evaluation -------------------------------------------------------

def test_constant_function_evaluates_to_constant():
    mesh = build_mesh(2, 5)
    f = FeFunction(mesh, np.full(mesh.n_vertices, 3.25))
    for p in [(0.1, 0.9), (0.5, 0.5), (1.0, 0.0), (0.33, 0.77)]:
        assert evaluate(f, p) == pytest.approx(3.25, abs=1e-14)


def test_linear_interpolation_1d():
    mesh = build_mesh(1, 2)
    f = FeFunction(mesh, [0.0, 1.0, 0.0])
    assert evaluate(f, 0.25) == pytest.approx(0.5)


def test_hat_function_at_its_vertex():
    mesh = build_mesh(2, 4)
    k = 2 * 5 + 2
    vals = np.zeros(mesh.n_vertices)
    vals[k] = 1.0
    f = FeFunction(mesh, vals)
    assert evaluate(f, mesh.vertices[k]) == 1.0
    assert f(mesh.vertices[k + 1]) == 0.0


@pytest.mark.parametrize("point", [(1.1,), (-1e-9,)])
def test_evaluate_rejects_outside_points(point):
    f = interpolate(build_mesh(1, 4), 1.0)
    with pytest.raises(ValueError):
        evaluate(f, point)


def test_evaluate_tolerates_roundoff_outside():
    f = interpolate(build_mesh(1, 4), 2.0)
    assert evaluate(f, 1.0 + 1e-13) == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(
    a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
    x=st.floats(0, 1), y=st.floats(0, 1), n=st.integers(2, 9),
)
def test_evaluate_exact_on_linear_functions(a, b, c, x, y, n):
    mesh = build_mesh(2, n)
    f = interpolate(mesh, lambda X, Y: a * X + b * Y + c)
    exact = a * x + b * y + c
    assert abs(evaluate(f, (x, y)) - exact) <= 1e-12 * max(1.0, abs(a) + abs(b) + abs(c))


def test_zero_trace_forces_boundary_values():
    mesh = build_mesh(2, 3)
    f = FeFunction(mesh, np.ones(mesh.n_vertices), zero_trace=True)
    assert np.all(f.values[mesh.boundary_nodes] == 0.0)
    assert np.all(f.values[mesh.interior_nodes] == 1.0)


def test_fefunction_rejects_wrong_length():
    with pytest.raises(ValueError):
        FeFunction(build_mesh(1, 4), np.zeros(4))
