"""Residual sensor, switch, and the two stabilisation forms.

``s0`` penalises normal-gradient jumps on ``dT \\ dOmega`` with weight
``h_T^2 (1 - varpi_T)``; ``s1`` is artificial diffusion with weight
``h_T varpi_T``.  Both carry ``|beta|`` once.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .fe_space import Field, Space, assemble_stiffness_blocks
from .mesh import Mesh


@dataclass(frozen=True)
class StabParams:
    sigma0: float = 0.01
    sigma1: float = 0.01
    alpha: float = 4.0
    U: float = 0.5
    rho1: int = 0
    rho2: int = 1

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ValueError("sigma0 and sigma1 must be >= 0")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.U > 0:
            raise ValueError(f"U must be > 0, got {self.U}")
        if self.rho1 not in (0, 1) or self.rho2 not in (0, 1):
            raise ValueError("rho1, rho2 must be 0 or 1")

    @property
    def switch_active(self) -> bool:
        return bool(self.rho1 or self.rho2)


@dataclass(frozen=True)
class SwitchField:
    varpi: np.ndarray
    r_t: np.ndarray
    source_time: float | None = None

    @classmethod
    def constant(cls, n_elements: int, value: float = 0.0, time=None) -> SwitchField:
        return cls(np.full(n_elements, float(value)), np.zeros(n_elements), time)


def beta_norm(beta) -> float:
    return float(np.hypot(*np.asarray(beta, dtype=float)))


def _stencil_matrix(dofs: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse ``(nb * nq, n)`` matrix evaluating ``local[b, q, :] @ u[dofs[b]]``."""
    nb, nq, m = local.shape
    rows = np.repeat(np.arange(nb * nq), m)
    cols = np.broadcast_to(dofs[:, None, :], (nb, nq, m)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(nb * nq, n))


class _Tables:
    """Per-space precomputed stencils for the sensor and the forms."""

    def __init__(self, space: Space):
        self.space = space
        self._advective = {}

    @cached_property
    def sup_jumps(self):
        k = self.space.k
        s = np.concatenate([self.space.facet_quad.points, np.linspace(0.0, 1.0, k + 1)])
        return self.space.jump_operator(s)

    @cached_property
    def jump_sample_matrix(self):
        fi, dofs, G, *_ = self.sup_jumps
        return _stencil_matrix(dofs, G, self.space.n_dofs), G.shape[1]

    @cached_property
    def jump_quad_matrix(self):
        fi, dofs, G, length, _, _ = self.space.interior_jumps
        return _stencil_matrix(dofs, G, self.space.n_dofs)

    @cached_property
    def jump_quad_weights(self):
        _, _, _, length, _, _ = self.space.interior_jumps
        return length[:, None] * self.space.facet_quad.weights[None, :]

    @cached_property
    def sample_value_matrix(self):
        phi, _ = self.space._sample_tab
        local = np.broadcast_to(phi[None], (self.space.n_elements,) + phi.shape)
        return _stencil_matrix(self.space.dof_map, local, self.space.n_dofs), phi.shape[0]

    def sample_advective_matrix(self, beta):
        key = tuple(float(b) for b in beta)
        if key not in self._advective:
            _, dphi = self.space._sample_tab
            local = np.einsum("eqad,d->eqa", dphi, np.asarray(key))
            self._advective[key] = _stencil_matrix(self.space.dof_map, local, self.space.n_dofs)
        return self._advective[key]

    @cached_property
    def facet_blocks(self):
        fi, dofs, G, length, _, _ = self.space.interior_jumps
        w = self.space.facet_quad.weights
        return np.einsum("q,f,fqa,fqb->fab", w, length, G, G)

    @cached_property
    def facet_builder(self):
        return self.space.facet_assembler.weighted(self.facet_blocks)

    @cached_property
    def stiffness_blocks(self):
        return assemble_stiffness_blocks(self.space)

    @cached_property
    def stiffness_builder(self):
        return self.space.element_assembler.weighted(self.stiffness_blocks)


_TABLES: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def tables(space: Space) -> _Tables:
    t = _TABLES.get(space)
    if t is None:
        t = _TABLES[space] = _Tables(space)
    return t


def facet_jump_sup(w: Field) -> np.ndarray:
    """Per element: max |[[grad w . n]]| over sample points of its non-boundary facets."""
    space = w.space
    m = space.mesh
    J, ns = tables(space).jump_sample_matrix
    per_facet = np.zeros(m.n_facets)
    per_facet[m.interior_facets] = np.abs(J @ w.coefficients).reshape(-1, ns).max(axis=1)
    return per_facet[m.element_facets].max(axis=1)


def bulk_residual_sup(w: Field, dt_w: Field, f_h: Field | None, beta) -> np.ndarray:
    """Per element: max |dt w + beta.grad w - f_h| over quadrature points and nodes."""
    t = tables(w.space)
    V, ns = t.sample_value_matrix
    coef = dt_w.coefficients - (f_h.coefficients if f_h is not None else 0.0)
    val = V @ coef + t.sample_advective_matrix(beta) @ w.coefficients
    return np.abs(val).reshape(-1, ns).max(axis=1)


def residual_indicator(w: Field, dt_w: Field | None, f_h: Field | None, beta, params: StabParams) -> np.ndarray:
    r = np.zeros(w.space.n_elements)
    if params.rho1:
        r += facet_jump_sup(w)
    if params.rho2:
        if dt_w is None:
            raise ValueError("rho2 = 1 needs the time derivative of w")
        r += bulk_residual_sup(w, dt_w, f_h, beta)
    return r


def switch_field(r_t: np.ndarray, mesh: Mesh, params: StabParams, time: float | None = None) -> SwitchField:
    base = np.minimum(1.0, mesh.element_diameter * np.asarray(r_t) / params.U)
    return SwitchField(base**params.alpha, np.asarray(r_t, dtype=float), time)


def _facet_coefficients(switch: SwitchField, space: Space) -> np.ndarray:
    m = space.mesh
    fi = m.interior_facets
    c = m.element_diameter**2 * (1.0 - switch.varpi)
    return c[m.facet_left[fi]] + c[m.facet_right[fi]]


def s0_apply(switch: SwitchField, u: Field, v: Field, beta) -> float:
    space = u.space
    fi, dofs, G, length, _, _ = space.interior_jumps
    ju = np.einsum("fqa,fa->fq", G, u.coefficients[dofs])
    jv = np.einsum("fqa,fa->fq", G, v.coefficients[dofs])
    per_facet = np.einsum("q,fq,fq->f", space.facet_quad.weights, ju, jv) * length
    return beta_norm(beta) * float(per_facet @ _facet_coefficients(switch, space))


def s1_apply(switch: SwitchField, u: Field, v: Field, beta) -> float:
    space = u.space
    gu, gv = u.grads_at_qp(), v.grads_at_qp()
    per_el = np.einsum("eq,eqd,eqd->e", space.qp_w, gu, gv)
    coef = space.mesh.element_diameter * switch.varpi
    return beta_norm(beta) * float(per_el @ coef)


def s_apply_operator(switch: SwitchField, space: Space, beta):
    """Sparse ``(S0, S1)`` with ``v^T S0 u = s0(switch; u, v)`` and likewise for ``S1``."""
    t = tables(space)
    b = beta_norm(beta)
    S0 = t.facet_builder(b * _facet_coefficients(switch, space))
    S1 = t.stiffness_builder(b * space.mesh.element_diameter * switch.varpi)
    return S0, S1


def s_apply_vector(switch: SwitchField, space: Space, beta, u: np.ndarray, sigma0: float, sigma1: float) -> np.ndarray:
    """``(sigma0 S0 + sigma1 S1) u`` without assembling the matrices."""
    t = tables(space)
    b = beta_norm(beta)
    out = np.zeros(space.n_dofs)
    if sigma0:
        J = t.jump_quad_matrix
        c = sigma0 * b * _facet_coefficients(switch, space)
        out += J.T @ ((J @ u).reshape(c.shape[0], -1) * t.jump_quad_weights * c[:, None]).ravel()
    if sigma1 and np.any(switch.varpi):
        c = sigma1 * b * space.mesh.element_diameter * switch.varpi
        loc = np.einsum("eab,eb->ea", t.stiffness_blocks, u[space.dof_map]) * c[:, None]
        out += np.bincount(space.dof_map.ravel(), weights=loc.ravel(), minlength=space.n_dofs)
    return out


def cip_seminorm_sq(v: Field, beta, weight_sq: np.ndarray | None = None) -> float:
    """``s0(0; v, weight^2 v)``: facet jumps of v weighted by ``weight_sq`` at facet quadrature points."""
    space = v.space
    fi, dofs, G, length, _, _ = space.interior_jumps
    j = np.einsum("fqa,fa->fq", G, v.coefficients[dofs])
    if weight_sq is not None:
        j2 = j * j * weight_sq
    else:
        j2 = j * j
    per_facet = np.einsum("q,fq->f", space.facet_quad.weights, j2) * length
    h2 = space.mesh.element_diameter**2
    m = space.mesh
    return beta_norm(beta) * float(per_facet @ (h2[m.facet_left[fi]] + h2[m.facet_right[fi]]))


__all__ = [
    "StabParams",
    "SwitchField",
    "residual_indicator",
    "switch_field",
    "s0_apply",
    "s1_apply",
    "s_apply_operator",
    "s_apply_vector",
    "cip_seminorm_sq",
]
