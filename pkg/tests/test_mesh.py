import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabtransport.mesh import RegionMask, build_structured_mesh, peel_boundary_layer


def test_two_triangles(two_tri):
    assert two_tri.n_elements == 2
    assert len(two_tri.interior_facets) == 1
    assert len(two_tri.boundary_facets) == 4


def test_periodic_2x2_identification():
    m = build_structured_mesh(2, 2, periodic=(True, True))
    assert m.n_elements == 8
    # 8 triangles x 3 edges / 2 sides each
    assert m.n_facets == 12
    assert len(m.interior_facets) == 12
    assert len(np.unique(m.periodic_map)) == 4
    assert len(m.vertices) == 9


def test_global_h():
    assert build_structured_mesh(3, 3).global_h == pytest.approx(np.sqrt(2) / 3, rel=1e-14)


def test_facet_orientation_and_areas():
    m = build_structured_mesh(4, 3, domain=(0.0, 2.0, 0.0, 1.0))
    assert m.areas.sum() == pytest.approx(2.0, rel=1e-14)
    assert np.all(m.areas > 0)
    # every element sees exactly three facets
    assert m.element_facets.shape == (m.n_elements, 3)


def test_partial_periodicity_counts():
    m = build_structured_mesh(3, 2, periodic=(True, False))
    tags = set(m.facet_tag[m.boundary_facets])
    assert tags == {"bottom", "top"}


def test_peel_trivial_masks():
    m = build_structured_mesh(4, 4)
    full = RegionMask(np.ones(m.n_elements, bool))
    empty = RegionMask(np.zeros(m.n_elements, bool))
    assert peel_boundary_layer(m, full).elements.all()
    assert not peel_boundary_layer(m, empty).elements.any()


def test_peel_against_brute_force():
    m = build_structured_mesh(4, 4)
    xv = m.vertices[m.triangles][..., 0]
    mask = np.all(xv < 0.75, axis=1)
    got = peel_boundary_layer(m, RegionMask(mask)).elements
    outside = [set(m.triangles[e]) for e in range(m.n_elements) if not mask[e]]
    expect = np.array([mask[e] and not any(set(m.triangles[e]) & o for o in outside) for e in range(m.n_elements)])
    np.testing.assert_array_equal(got, expect)


def test_peel_rejects_wrong_length():
    m = build_structured_mesh(2, 2)
    with pytest.raises(ValueError):
        peel_boundary_layer(m, RegionMask(np.ones(3, bool)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.booleans(), st.booleans())
def test_euler_counts(nx, ny, px, py):
    m = build_structured_mesh(nx, ny, periodic=(px, py))
    assert m.n_elements == 2 * nx * ny
    # each interior facet has two sides, each boundary facet one
    assert 2 * len(m.interior_facets) + len(m.boundary_facets) == 3 * m.n_elements


def test_periodic_needs_two_cells():
    with pytest.raises(ValueError):
        build_structured_mesh(1, 3, periodic=(True, False))
