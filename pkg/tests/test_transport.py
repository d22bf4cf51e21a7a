import numpy as np
import pytest
import scipy.sparse.linalg as spla

from conftest import periodic_space
from stabtransport.fe_space import Field, build_space, interpolate_nodal
from stabtransport.mesh import build_structured_mesh
from stabtransport.stabilization import StabParams, SwitchField
from stabtransport.transport import (
    ProblemSpec,
    TransportOperator,
    assemble_advection,
    assemble_inflow_terms,
    galerkin_residual_check,
    inflow_facet_mask,
    spatial_residual,
)


def test_advection_kills_constants_and_is_skew_on_torus(rng):
    s = periodic_space(5, 2)
    A = assemble_advection(s, (1.0, 0.3))
    np.testing.assert_allclose(A @ np.ones(s.n_dofs), 0.0, atol=1e-13)
    for _ in range(5):
        u = rng.standard_normal(s.n_dofs)
        assert abs(u @ A @ u) < 1e-12 * (u @ u)


def test_advection_of_x():
    s = build_space(build_structured_mesh(3, 3), 2)
    A = assemble_advection(s, (1.0, 0.0))
    u = interpolate_nodal(s, lambda p: p[:, 0]).coefficients
    assert np.ones(s.n_dofs) @ A @ u == pytest.approx(1.0, rel=1e-13)


def test_inflow_edges():
    s = build_space(build_structured_mesh(4, 4), 1)
    tags = s.mesh.facet_tag[s.boundary_facets[0]]
    assert set(tags[inflow_facet_mask(s, (1.0, 0.0))]) == {"left"}
    assert set(tags[inflow_facet_mask(s, (1.0, 1.0))]) == {"left", "bottom"}
    B, b = assemble_inflow_terms(s, (1.0, 1.0), lambda x, t: np.ones(x.shape[:-1]), 0.0)
    assert b.sum() == pytest.approx(2.0, rel=1e-13)


def test_inflow_absorbs_constants(rng):
    s = build_space(build_structured_mesh(3, 2), 2)
    B, b = assemble_inflow_terms(s, (0.7, -0.2), lambda x, t: np.ones(x.shape[:-1]), 0.0)
    np.testing.assert_allclose(B @ np.ones(s.n_dofs), b, atol=1e-14)


def test_constant_state_is_steady():
    s = periodic_space(4, 2)
    spec = ProblemSpec(beta=(1.0, 0.5), u0=lambda x: np.full(len(x), 2.0))
    u = Field(s, np.full(s.n_dofs, 2.0))
    r = spatial_residual(u, 0.0, SwitchField(np.full(s.n_elements, 0.4), np.zeros(s.n_elements)), spec, StabParams())
    assert np.abs(r).max() < 1e-13


def test_periodic_spec_needs_periodic_mesh():
    spec = ProblemSpec(beta=(1.0, 0.0), u0=lambda x: x[:, 0])
    with pytest.raises(ValueError):
        TransportOperator(build_space(build_structured_mesh(2, 2), 1), spec, StabParams())
    with pytest.raises(ValueError):
        ProblemSpec(beta=(1.0, 0.0), u0=lambda x: x[:, 0], bc="outflow")


@pytest.mark.parametrize("k", [1, 2])
def test_time_derivative_converges(k):
    """M^-1 r against the interpolant of the exact dt u for u = sin(2 pi (x - t))."""
    spec = ProblemSpec(beta=(1.0, 0.0), u0=lambda x: np.sin(2 * np.pi * x[:, 0]))
    errs, hs = [], []
    for n in (8, 16, 32):
        s = periodic_space(n, k)
        op = TransportOperator(s, spec, StabParams())
        u = interpolate_nodal(s, spec.u0).coefficients
        du = op.time_derivative(u, 0.0, SwitchField.constant(s.n_elements))
        ex = interpolate_nodal(s, lambda x: -2 * np.pi * np.cos(2 * np.pi * x[:, 0])).coefficients
        d = du - ex
        errs.append(np.sqrt(d @ s.mass @ d))
        hs.append(s.mesh.global_h)
    rate = np.log(errs[-2] / errs[-1]) / np.log(hs[-2] / hs[-1])
    assert rate >= k - 0.1


def test_shock_switch_saturates_at_start():
    m = build_structured_mesh(20, 20)  # x = 1/3 off the grid lines
    s = build_space(m, 2)
    step = lambda x, t=0.0: np.where(x[..., 0] - t < 1 / 3, 1.0, 0.0)
    spec = ProblemSpec(beta=(1.0, 0.0), u0=step, g=lambda x, t: np.ones(x.shape[:-1]), bc="inflow")
    op = TransportOperator(s, spec, StabParams(U=0.5))
    u = interpolate_nodal(s, step).coefficients
    lag = op.time_derivative(u, 0.0, SwitchField.constant(m.n_elements))
    assert np.all(np.isfinite(lag))
    sw = op.switch(u, 0.0, lag)
    xv = m.vertices[m.triangles][..., 0]
    cross = (xv.min(1) < 1 / 3) & (xv.max(1) > 1 / 3)
    assert cross.any() and np.all(sw.varpi[cross] == 1.0)


def test_apply_matches_assembled_matrix(rng):
    s = build_space(build_structured_mesh(4, 4), 2)
    spec = ProblemSpec(beta=(1.0, 0.25), u0=lambda x: x[:, 0], g=lambda x, t: np.zeros(x.shape[:-1]), bc="inflow")
    op = TransportOperator(s, spec, StabParams())
    sw = SwitchField(rng.uniform(0, 1, s.n_elements), np.zeros(s.n_elements))
    u = rng.standard_normal(s.n_dofs)
    np.testing.assert_allclose(op.apply(u, sw), op.system_matrix(sw) @ u, rtol=1e-11, atol=1e-12)


def test_galerkin_defect_of_steady_solve():
    s = build_space(build_structured_mesh(6, 6), 2)
    f = lambda x, t: np.ones(x.shape[:-1])
    spec = ProblemSpec(beta=(1.0, 0.5), u0=lambda x: np.zeros(len(x)), f=f, g=lambda x, t: np.zeros(x.shape[:-1]), bc="inflow")
    op = TransportOperator(s, spec, StabParams())
    sw = SwitchField.constant(s.n_elements, 0.3)
    u = Field(s, spla.spsolve(op.system_matrix(sw).tocsc(), op.load(0.0)))
    zero = np.zeros(s.n_dofs)
    assert galerkin_residual_check(op, f, u, zero, 0.0, sw) <= 1e-10
    # wrong source: the defect is O(1) relative to the load
    wrong = lambda x, t: 2 * np.ones(x.shape[:-1])
    assert galerkin_residual_check(op, wrong, u, zero, 0.0, sw) > 1e-3
