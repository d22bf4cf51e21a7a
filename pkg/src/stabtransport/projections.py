"""Oswald averaging from elementwise polynomials to the continuous space, and the L2 projection."""

from __future__ import annotations

import numpy as np

from .fe_space import DGField, Field, Space, assemble_load, reference_basis, reference_nodes


def dg_gradient_along(v: Field, beta) -> DGField:
    """``beta . grad v`` as a DG field (exact: it lies in P_{k-1} on each element)."""
    space = v.space
    _, dref = reference_basis(space.k, reference_nodes(space.k))
    d = np.einsum("eij,qaj->eqai", space.inv_jacobian_t, dref)
    vals = np.einsum("ea,eqad,d->eq", v.local(), d, np.asarray(beta, dtype=float))
    return DGField(space, vals)


def oswald_average(v: DGField) -> Field:
    """Each global DOF takes the arithmetic mean of the values contributed by the elements sharing it."""
    space = v.space
    dofs = space.dof_map.ravel()
    total = np.bincount(dofs, weights=v.blocks.ravel(), minlength=space.n_dofs)
    count = np.bincount(dofs, minlength=space.n_dofs)
    return Field(space, total / count)


def l2_project(space: Space, g, x0: np.ndarray | None = None) -> Field:
    """Solve ``M c = (g, phi_i)``.

    ``g`` may be a Field, a DGField, an array of values at the element
    quadrature points, or a callable of the physical points ``(n_el, nq, 2)``.
    """
    if isinstance(g, (Field, DGField)):
        vals = g.values_at_qp()
    elif callable(g):
        vals = np.broadcast_to(g(space.qp_x), space.qp_w.shape)
    else:
        vals = np.asarray(g, dtype=float)
    b = assemble_load(space, vals)
    return Field(space, space.solve_mass(b, x0=x0))


def dg_jump_sq(v: DGField) -> float:
    """``sum_F h_F ||[[v]]||_F^2`` over interior facets for DG data."""
    space = v.space
    m = space.mesh
    fi = m.interior_facets
    s = space.facet_quad.points
    L, R = m.facet_left[fi], m.facet_right[fi]
    phiL, _, _ = space._facet_eval(L, m.facet_edge_left[fi], s)
    phiR = np.empty_like(phiL)
    flip = m.facet_flip[fi]
    for sel, sr in ((~flip, s), (flip, 1.0 - s)):
        if sel.any():
            phiR[sel], _, _ = space._facet_eval(R[sel], m.facet_edge_right[fi][sel], sr)
    jump = np.einsum("fqa,fa->fq", phiL, v.blocks[L]) - np.einsum("fqa,fa->fq", phiR, v.blocks[R])
    length = np.linalg.norm(np.diff(m.vertices[m.facet_vertices[fi]], axis=1)[:, 0], axis=1)
    return float(np.sum(length * length * np.einsum("q,fq->f", space.facet_quad.weights, jump**2)))
