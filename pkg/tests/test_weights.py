import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hat_x_minus_y, periodic_space
from stabtransport.fe_space import Field, build_space, interpolate_nodal
from stabtransport.mesh import build_structured_mesh
from stabtransport.stabilization import SwitchField
from stabtransport.weights import (
    NormSample,
    WeightSpec,
    default_c_theta,
    norm_terms,
    radial_profile,
    region_split_shock,
    residual_norm,
    stability_diagnostic,
    stability_test_function,
    trapezoid_weights,
    triple_norms,
    weight_eval,
    weighted_l2,
    weighted_l2_error,
    weighted_seminorm_s,
)

BETA = (1.0, 0.5)


def spec(**kw):
    base = dict(x0=(0.4, 0.5), r0=0.1, K=1.5, h=1 / 16)
    base.update(kw)
    return WeightSpec(**base)


# {{{ the weight


@pytest.mark.parametrize("bad", [dict(K=1.0), dict(r0=-0.1), dict(h=0.0), dict(blend_width=0.0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        spec(**bad)


def test_plateau():
    w = spec()
    x = np.array([[0.45, 0.52], [0.4, 0.5]])
    val, grad, lphi = weight_eval(w, BETA, x, 0.0)
    np.testing.assert_array_equal(val, 1.0)
    np.testing.assert_array_equal(grad, 0.0)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_closed_form_beyond_the_blend(order):
    w = spec(order=order)
    r = w.r0 + w.sigma + w.blend
    # psi(s) = s - b/2 once the ramp is complete, so phi = exp(-(sigma + b/2)/sigma)
    val, dval = radial_profile(w, np.array([r]))
    assert val[0] == pytest.approx(np.exp(-1.0 - w.blend / (2 * w.sigma)), rel=1e-13)
    assert dval[0] == pytest.approx(-val[0] / w.sigma, rel=1e-13)


def test_profile_derivative_matches_finite_differences():
    w = spec(blend_width=0.05)
    r = np.linspace(0.0, 1.0, 301)
    val, dval = radial_profile(w, r)
    eps = 1e-6
    fd = (radial_profile(w, r + eps)[0] - radial_profile(w, r - eps)[0]) / (2 * eps)
    np.testing.assert_allclose(dval, fd, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-1, 2),
    st.floats(-1, 2),
    st.floats(0, 1),
    st.floats(-0.5, 0.5),
)
def test_transport_invariance_and_bounds(x, y, t, s):
    w = spec()
    p = np.array([x, y])
    v0 = weight_eval(w, BETA, p, t)
    v1 = weight_eval(w, BETA, p + s * np.asarray(BETA), t + s)
    assert v1[0] == pytest.approx(v0[0], rel=1e-14, abs=1e-300)
    assert 0.0 < v0[0] <= 1.0
    assert np.linalg.norm(v0[1]) <= v0[0] / w.sigma * (1 + 1e-12)
    assert v0[2] == 0.0


def test_time_derivative_by_finite_differences(rng):
    w = spec()
    x = rng.uniform(0, 1, (50, 2))
    eps = 1e-6
    dt = (weight_eval(w, BETA, x, 0.2 + eps)[0] - weight_eval(w, BETA, x, 0.2 - eps)[0]) / (2 * eps)
    grad = weight_eval(w, BETA, x, 0.2)[1]
    np.testing.assert_allclose(dt + grad @ np.asarray(BETA), 0.0, atol=1e-8)


def test_periodic_minimum_image():
    w = spec(x0=(0.05, 0.5), period=(1.0, 1.0))
    a = weight_eval(w, BETA, np.array([0.95, 0.5]), 0.0)[0]
    b = weight_eval(w, BETA, np.array([0.15, 0.5]), 0.0)[0]
    assert a == pytest.approx(b, rel=1e-14)


# }}}

# {{{ norms


def test_unweighted_reductions(rng):
    s = periodic_space(4, 2)
    v = Field(s, rng.standard_normal(s.n_dofs))
    l2 = np.sqrt(v.coefficients @ s.mass @ v.coefficients)
    assert weighted_l2(v, None, 0.0) == pytest.approx(l2, rel=1e-12)
    assert weighted_l2(v, spec(period=(1, 1)), 0.3, BETA) <= l2
    with pytest.raises(ValueError):
        weighted_l2(v, spec(), 0.0)


def test_weighted_norm_small_where_weight_is():
    s = build_space(build_structured_mesh(16, 16), 1)
    w = spec(x0=(0.1, 0.1), r0=0.0, K=1.1, h=1 / 256)
    v = interpolate_nodal(s, lambda p: np.where(p[:, 0] > 0.75, 1.0, 0.0))
    eps = weight_eval(w, BETA, s.qp_x, 0.0)[0][v.values_at_qp().sum(1) != 0].max()
    assert weighted_l2(v, w, 0.0, BETA) <= eps * weighted_l2(v, None, 0.0)


def test_seminorm_oracle(two_tri):
    v = interpolate_nodal(build_space(two_tri, 1), hat_x_minus_y)
    big = WeightSpec(x0=(0.5, 0.5), r0=5.0, K=2.0, h=0.5)
    assert weighted_seminorm_s(v, big, 0.0, (1.0, 0.0)) ** 2 == pytest.approx(8 * np.sqrt(2), rel=1e-13)
    assert weighted_seminorm_s(v, None, 0.0, (1.0, 0.0)) ** 2 == pytest.approx(8 * np.sqrt(2), rel=1e-13)
    lin = interpolate_nodal(build_space(two_tri, 2), lambda p: p[:, 0] ** 2)
    assert weighted_seminorm_s(lin, None, 0.0, (1.0, 0.0)) == pytest.approx(0.0, abs=1e-12)


def test_error_quadrature_refinement():
    s = build_space(build_structured_mesh(4, 4), 1)
    u = Field(s, np.zeros(s.n_dofs))
    step = lambda x, t: np.where(x[..., 0] < 0.3, 1.0, 0.0)
    exact = np.sqrt(0.3)
    coarse = weighted_l2_error(u, step, None, 0.0)
    fine = weighted_l2_error(u, step, None, 0.0, refine=8)
    assert abs(fine - exact) < abs(coarse - exact) or abs(fine - exact) < 1e-3


def test_bulk_term_vanishes_for_transported_profile():
    s = build_space(build_structured_mesh(5, 5), 2)
    beta = (1.0, 0.0)
    # v = x^2 moved along beta has dt v = -2x, which lies in V_h
    v = interpolate_nodal(s, lambda p: p[:, 0] ** 2)
    dt = interpolate_nodal(s, lambda p: -2.0 * p[:, 0])
    t = norm_terms(v, dt, None, 0.0, beta)
    assert t.bulk_sq < 1e-26
    assert t.s_sq < 1e-24
    assert residual_norm(v, dt, None, 0.0, beta) < 1e-12


def test_triple_norms_zero_and_reductions(rng):
    s = periodic_space(4, 1)
    zero = Field(s, np.zeros(s.n_dofs))
    rep = triple_norms([NormSample(0.0, zero, zero), NormSample(0.1, zero, zero)], None, BETA)
    assert rep.star_norm_phi == 0.0 and rep.triple_norm_wh_phi == 0.0
    v = Field(s, rng.standard_normal(s.n_dofs))
    dv = Field(s, rng.standard_normal(s.n_dofs))
    sw0 = SwitchField.constant(s.n_elements, 0.0)
    rep = triple_norms([NormSample(0.0, v, dv, sw0), NormSample(1.0, v, dv, sw0)], None, BETA)
    assert rep.triple_norm_whS_phi == pytest.approx(rep.residual_norm_phi, rel=1e-14)
    with pytest.raises(ValueError):
        triple_norms([], None, BETA)


def test_trapezoid_weights():
    np.testing.assert_allclose(trapezoid_weights([0.0, 0.1, 0.3]), [0.05, 0.15, 0.1])
    assert trapezoid_weights([0.5]).tolist() == [0.0]


# }}}

# {{{ stability test function and diagnostic


def test_test_function_identities(rng):
    s = periodic_space(4, 2)
    v = Field(s, rng.standard_normal(s.n_dofs))
    np.testing.assert_allclose(stability_test_function(v, None, None, 0.0).coefficients, v.coefficients, atol=1e-10)
    c = Field(s, np.full(s.n_dofs, 2.0))
    w = spec(period=(1, 1))
    from stabtransport.projections import l2_project

    expect = l2_project(s, 2.0 * weight_eval(w, BETA, s.qp_x, 0.1)[0] ** 2)
    got = stability_test_function(c, Field(s, np.zeros(s.n_dofs)), w, 0.1, 0.1, BETA)
    np.testing.assert_allclose(got.coefficients, expect.coefficients, atol=1e-12)
    with pytest.raises(ValueError):
        stability_test_function(v, None, None, -1.0)


def test_diagnostic_of_zero_trajectory():
    s = periodic_space(4, 1)
    zero = Field(s, np.zeros(s.n_dofs))
    d = stability_diagnostic([NormSample(t, zero, zero) for t in (0.0, 0.1, 0.2)], None, BETA, 0.01, 0.01)
    np.testing.assert_array_equal(d.lhs_no_c, 0.0)
    np.testing.assert_array_equal(d.rhs_no_c, 0.0)
    assert d.required_constant == 0.0


def test_default_c_theta():
    assert default_c_theta(0.1, 0.01, 0.02) == pytest.approx(5e-4)


# }}}

# {{{ regions


def test_region_split():
    m = build_structured_mesh(24, 24)
    h = m.global_h
    line_only = region_split_shock(m, 0.5 + 1 / 48, 0.0)
    xv = m.vertices[m.triangles][..., 0]
    np.testing.assert_array_equal(line_only.rough.elements, (xv.min(1) <= 0.5 + 1 / 48) & (xv.max(1) >= 0.5 + 1 / 48))
    assert not region_split_shock(m, 0.5, 2.0).smooth.elements.any()
    band = region_split_shock(m, lambda t: 1 / 3 + t, 2 * h, 0.375)
    xc = m.centroids[band.rough.elements, 0]
    assert abs(0.5 * (xc.min() + xc.max()) - (1 / 3 + 0.375)) < h
    assert np.all(np.abs(xc - 0.70833) <= 2 * h + h)
    # the peeled smooth part never touches the rough part
    assert not (band.smooth_minus.elements & band.rough.elements).any()
    assert (band.smooth_minus.elements | band.rough_plus.elements).all()
    with pytest.raises(ValueError):
        region_split_shock(m, 0.5, -1.0)


# }}}
