import numpy as np
import pytest

from stabtransport.fe_space import DGField, Field, build_space, integrate, interpolate_nodal
from stabtransport.mesh import build_structured_mesh
from stabtransport.projections import dg_gradient_along, dg_jump_sq, l2_project, oswald_average


def test_oswald_identity_on_continuous_fields(rng):
    s = build_space(build_structured_mesh(3, 3), 2)
    u = Field(s, rng.standard_normal(s.n_dofs))
    np.testing.assert_allclose(oswald_average(u.as_dg()).coefficients, u.coefficients, atol=1e-14)


def test_oswald_two_triangles(two_tri):
    s = build_space(two_tri, 1)
    v = DGField(s, [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    c = oswald_average(v).coefficients
    # vertex 1 belongs to the lower element only, vertex 2 to the upper one
    np.testing.assert_allclose(c, [0.5, 1.0, 0.0, 0.5], atol=1e-15)


def test_oswald_error_bounded_by_jumps(rng):
    """Calibrate ||v - i_av v||^2 <= C sum_F h_F ||[v]||^2 on the coarsest mesh, check it on finer ones."""
    ratios = []
    for n in (4, 8, 16):
        s = build_space(build_structured_mesh(n, n, periodic=(True, True)), 2)
        worst = 0.0
        for _ in range(20):
            v = DGField(s, rng.standard_normal((s.n_elements, s.n_local)))
            d = oswald_average(v).values_at_qp() - v.values_at_qp()
            worst = max(worst, integrate(s, d**2) / dg_jump_sq(v))
        ratios.append(worst)
    C = 1.5 * ratios[0]
    assert all(r <= C for r in ratios[1:])


def test_dg_gradient_of_linear(two_tri):
    s = build_space(two_tri, 2)
    u = interpolate_nodal(s, lambda p: 2 * p[:, 0] + 3 * p[:, 1])
    g = dg_gradient_along(u, (1.0, 0.5))
    np.testing.assert_allclose(g.blocks, 3.5, atol=1e-13)
    assert dg_jump_sq(g) == pytest.approx(0.0, abs=1e-24)


def test_l2_project_idempotent_and_constants(rng):
    s = build_space(build_structured_mesh(4, 4), 2)
    u = Field(s, rng.standard_normal(s.n_dofs))
    np.testing.assert_allclose(l2_project(s, u).coefficients, u.coefficients, atol=1e-11)
    c = l2_project(s, lambda x: np.full(x.shape[:-1], -0.75))
    np.testing.assert_allclose(c.coefficients, -0.75, atol=1e-12)


def test_l2_project_step_against_dense_least_squares():
    s = build_space(build_structured_mesh(8, 8), 2)
    g = lambda x: np.where(x[..., 0] < 1 / 3, 1.0, 0.0)
    u = l2_project(s, g)
    # weighted least squares over all quadrature points with the global basis
    B = np.zeros((s.n_elements * s.qp_w.shape[1], s.n_dofs))
    rows = np.arange(B.shape[0]).reshape(s.n_elements, -1)
    for a in range(s.n_local):
        B[rows, s.dof_map[:, a][:, None]] += s.qp_phi[:, a][None, :]
    w = np.sqrt(s.qp_w.ravel())
    ref = np.linalg.lstsq(B * w[:, None], w * g(s.qp_x).ravel(), rcond=None)[0]
    np.testing.assert_allclose(u.coefficients, ref, atol=1e-10)
    over = u.coefficients.max() - 1.0
    assert over == pytest.approx(ref.max() - 1.0, abs=1e-10)
    assert over > 0.05
