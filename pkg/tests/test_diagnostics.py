import numpy as np
import pytest

from conftest import periodic_space
from stabtransport.diagnostics import (
    RatioStudy,
    cross_term_ratios,
    random_field,
    random_switch,
    ratio_studies,
    s_bound_ratio,
)
from stabtransport.stabilization import StabParams, SwitchField


def test_ratio_study_spread():
    st = RatioStudy("x", [8, 16], [2.0, 2.6])
    assert st.spread == pytest.approx(0.3)
    assert st.stable(0.5) and not st.stable(0.2)
    assert not RatioStudy("y", [8, 16], [1.0, np.inf]).stable()


def test_s_bound_ratio_at_most_one_over_min_sigma_weight(rng):
    """With varpi = 0 the bound is attained by s0 alone: |v|_s^2 / s0 = 1 (up to the 1 - varpi factor)."""
    s = periodic_space(4, 2)
    v = random_field(s, rng)
    assert s_bound_ratio(v, SwitchField.constant(s.n_elements, 0.0), (1.0, 0.0)) == pytest.approx(1.0, rel=1e-12)


def test_cross_ratio_bounded_by_cauchy_schwarz(rng):
    s = periodic_space(4, 2)
    sw = random_switch(s, rng, StabParams(), (1.0, 0.5))
    assert np.all((sw.varpi >= 0) & (sw.varpi <= 1))
    v, dv = random_field(s, rng), random_field(s, rng)
    worst = cross_term_ratios(v, dv, sw, (1.0, 0.5))
    other = cross_term_ratios(v, dv, sw, (1.0, 0.5), z=random_field(s, rng))
    assert worst[0] >= other[0] - 1e-12 and worst[1] >= other[1] - 1e-12


def test_small_ratio_study_is_finite():
    res = ratio_studies(sizes=(4, 8), k=1, n_samples=5, seed=3)
    assert set(res) == {"s_bound", "cross_s0", "cross_s1", "inverse_weighted", "oswald_weighted"}
    for st in res.values():
        assert len(st.max_ratio) == 2 and np.all(np.isfinite(st.max_ratio))
    again = ratio_studies(sizes=(4, 8), k=1, n_samples=5, seed=3)
    assert again["cross_s0"].max_ratio == res["cross_s0"].max_ratio
