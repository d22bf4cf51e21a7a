import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hat_x_minus_y, periodic_space
from stabtransport.fe_space import (
    DGField,
    Field,
    build_space,
    evaluate,
    integrate,
    interpolate_nodal,
    reference_basis,
    reference_nodes,
)
from stabtransport.mesh import RegionMask, build_structured_mesh
from stabtransport.quadrature import composite_triangle_rule, interval_rule, triangle_rule


# {{{ quadrature


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8))
def test_triangle_rule_exact_on_monomials(a, b):
    deg = a + b
    r = triangle_rule(max(deg, 1))
    x, y = r.points[:, 1], r.points[:, 2]
    # int_T x^a y^b over the reference triangle = a! b! / (a + b + 2)!
    from math import factorial

    exact = factorial(a) * factorial(b) / factorial(a + b + 2)
    assert r.weights @ (x**a * y**b) == pytest.approx(exact, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("deg", [1, 3, 5, 7])
def test_interval_rule(deg):
    r = interval_rule(deg)
    for p in range(deg + 1):
        assert r.weights @ r.points**p == pytest.approx(1.0 / (p + 1), rel=1e-13)


def test_composite_rule_weights_and_exactness():
    r = composite_triangle_rule(4, 3)
    assert r.weights.sum() == pytest.approx(0.5, rel=1e-14)
    x = r.points[:, 1]
    assert r.weights @ x**4 == pytest.approx(24 / 720, rel=1e-12)


# }}}

# {{{ basis and dofs


@pytest.mark.parametrize("k", [1, 2, 3])
def test_basis_is_nodal_and_sums_to_one(k):
    nodes = reference_nodes(k)
    phi, dphi = reference_basis(k, nodes)
    np.testing.assert_allclose(phi, np.eye(len(nodes)), atol=1e-13)
    rng = np.random.default_rng(k)
    b = rng.dirichlet(np.ones(3), size=20)
    phi, dphi = reference_basis(k, b)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(dphi.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize(
    "nx,k,periodic,expected",
    [(1, 1, False, 4), (1, 2, False, 9), (2, 1, True, 4), (4, 3, False, 13 * 13), (4, 2, True, 64)],
)
def test_dof_counts(nx, k, periodic, expected):
    m = build_structured_mesh(nx, nx, periodic=(periodic, periodic))
    assert build_space(m, k).n_dofs == expected


def test_unsupported_degree(two_tri):
    with pytest.raises(ValueError):
        build_space(two_tri, 4)


# }}}

# {{{ fields


def test_interpolate_constant_and_linear():
    s = build_space(build_structured_mesh(3, 3), 1)
    c = interpolate_nodal(s, lambda p: 2.5 * np.ones(len(p)))
    np.testing.assert_allclose(c.coefficients, 2.5)
    f = interpolate_nodal(s, lambda p: p[:, 0])
    np.testing.assert_allclose(f.values_at_qp(), s.qp_x[..., 0], atol=1e-14)


def test_interpolation_rate_k2():
    errs, hs = [], []
    for n in (4, 8, 16):
        s = periodic_space(n, 2)
        g = lambda x: np.sin(2 * np.pi * x[..., 0])
        u = interpolate_nodal(s, g)
        errs.append(np.sqrt(integrate(s, (u.values_at_qp() - g(s.qp_x)) ** 2)))
        hs.append(s.mesh.global_h)
    rate = np.log(errs[-2] / errs[-1]) / np.log(hs[-2] / hs[-1])
    assert rate == pytest.approx(3.0, abs=0.15)


def test_interpolate_rejects_nan(two_tri):
    s = build_space(two_tri, 1)
    with pytest.raises(ValueError):
        interpolate_nodal(s, lambda p: np.full(len(p), np.nan))


def test_evaluate_gradient(two_tri):
    s = build_space(two_tri, 1)
    u = interpolate_nodal(s, lambda p: p[:, 0] - p[:, 1])
    val, grad = evaluate(u, 0, [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(grad, [1.0, -1.0], atol=1e-14)
    c = interpolate_nodal(s, lambda p: np.full(len(p), 3.0))
    val, grad = evaluate(c, 1, [0.2, 0.3, 0.5])
    assert val == pytest.approx(3.0)
    np.testing.assert_allclose(grad, 0.0, atol=1e-14)


def test_evaluate_rejects_bad_barycentrics(two_tri):
    s = build_space(two_tri, 1)
    with pytest.raises(ValueError):
        evaluate(Field(s, np.zeros(4)), 0, [0.5, 0.5, 0.5])


def test_gradient_against_finite_differences(rng):
    s = build_space(build_structured_mesh(3, 3), 2)
    u = Field(s, rng.standard_normal(s.n_dofs))
    b = np.array([0.2, 0.3, 0.5])
    e = 7
    tri = s.mesh.vertices[s.mesh.triangles[e]]
    x = b @ tri
    _, grad = evaluate(u, e, b)
    # barycentrics of a shifted point via the affine map
    J = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    eps = 1e-6
    fd = []
    for d in range(2):
        dx = np.zeros(2)
        dx[d] = eps
        vals = []
        for sgn in (1, -1):
            lam = np.linalg.solve(J, x + sgn * dx - tri[0])
            vals.append(evaluate(u, e, [1 - lam.sum(), *lam])[0])
        fd.append((vals[0] - vals[1]) / (2 * eps))
    np.testing.assert_allclose(grad, fd, rtol=1e-6)


def test_integrals(two_tri):
    s = build_space(two_tri, 1)
    u = interpolate_nodal(s, hat_x_minus_y)
    assert integrate(s, u.values_at_qp()) == pytest.approx(1 / 6, abs=1e-14)
    assert integrate(s, lambda x: np.ones(x.shape[:-1])) == pytest.approx(1.0, abs=1e-14)
    lower = RegionMask(np.array([True, False]))
    assert integrate(s, np.ones(s.qp_w.shape), region=lower) == pytest.approx(0.5, abs=1e-14)


# }}}

# {{{ mass matrix


def test_p1_mass_matrix_by_hand(two_tri):
    s = build_space(two_tri, 1)
    M = np.zeros((4, 4))
    for tri in two_tri.triangles:
        for a in tri:
            for b in tri:
                M[a, b] += 0.5 / 12 * (1 + (a == b))
    np.testing.assert_allclose(s.mass.toarray(), M, atol=1e-15)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_mass_partition_of_unity_and_solve(k):
    s = build_space(build_structured_mesh(3, 2, domain=(0, 1.5, 0, 1)), k)
    M = s.mass
    assert M.sum() == pytest.approx(1.5, rel=1e-13)
    x = s.solve_mass(M @ np.ones(s.n_dofs))
    np.testing.assert_allclose(x, 1.0, atol=1e-12)
    assert abs(M - M.T).max() < 1e-15


def test_dg_field_shape_check(two_tri):
    s = build_space(two_tri, 1)
    with pytest.raises(ValueError):
        DGField(s, np.zeros((2, 4)))


# }}}
