"""Advection forms and the semi-discrete operator ``M du/dt = r(u, t)``."""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fe_space import Field, Space, assemble_load, interpolate_nodal
from .stabilization import (
    StabParams,
    SwitchField,
    residual_indicator,
    s_apply_operator,
    s_apply_vector,
    switch_field,
)

logger = logging.getLogger(__name__)

# callables take points of shape (..., 2) and a time
SpaceTimeFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    beta: tuple[float, float]
    u0: Callable[[np.ndarray], np.ndarray]
    f: SpaceTimeFn | None = None
    g: SpaceTimeFn | None = None
    bc: str = "periodic"
    T_final: float = 1.0
    exact: SpaceTimeFn | None = None

    def __post_init__(self):
        if self.bc not in ("periodic", "inflow"):
            raise ValueError(f"bc must be 'periodic' or 'inflow', got {self.bc!r}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    def check_space(self, space: Space):
        if self.bc == "periodic" and not all(space.mesh.periodic):
            raise ValueError("periodic problems need a mesh periodic in both directions")


def assemble_advection(space: Space, beta) -> sp.csr_matrix:
    """``v^T A u = int (beta . grad u) v``."""
    bgrad = np.einsum("eqbd,d->eqb", space.qp_dphi, np.asarray(beta, dtype=float))
    local = np.einsum("eq,qa,eqb->eab", space.qp_w, space.qp_phi, bgrad)
    return space.element_assembler.matrix(local)


def inflow_facet_mask(space: Space, beta) -> np.ndarray:
    _, _, _, _, _, n = space.boundary_facets
    return n @ np.asarray(beta, dtype=float) < 0.0


def assemble_inflow_terms(space: Space, beta, g: SpaceTimeFn | None, t: float):
    """``(B_in, b_in)`` with ``|beta.n|``-weighted mass and load on the inflow boundary."""
    fb, elems, phi, x, length, n = space.boundary_facets
    beta = np.asarray(beta, dtype=float)
    inflow = n @ beta < 0.0
    w = space.facet_quad.weights
    bn = np.abs(n @ beta) * inflow * length
    dofs = space.dof_map[elems]
    nl = space.n_local
    local = np.einsum("f,q,fqa,fqb->fab", bn, w, phi, phi)
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    B = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs))
    b = np.zeros(space.n_dofs)
    if g is not None:
        gv = np.broadcast_to(g(x, t), phi.shape[:2])
        if not inflow.any() and np.any(gv != 0):
            logger.warning("inflow data given but the inflow boundary is empty")
        np.add.at(b, dofs.ravel(), np.einsum("f,q,fq,fqa->fa", bn, w, gv, phi).ravel())
    return B, b


class TransportOperator:
    """Spatial discretisation for one (space, problem, parameters) triple.

    ``frozen_switch`` pins the switch (e.g. zeros for plain CIP) instead of
    recomputing it from the state.
    """

    def __init__(self, space: Space, spec: ProblemSpec, params: StabParams, frozen_switch: SwitchField | None = None):
        spec.check_space(space)
        self.space = space
        self.spec = spec
        self.params = params
        self.frozen_switch = frozen_switch

    @cached_property
    def A(self) -> sp.csr_matrix:
        return assemble_advection(self.space, self.spec.beta)

    @cached_property
    def _inflow_matrix(self):
        if self.spec.bc != "inflow":
            return None
        return assemble_inflow_terms(self.space, self.spec.beta, None, 0.0)[0]

    def load(self, t: float) -> np.ndarray:
        if self.spec.f is None and (self.spec.bc != "inflow" or self.spec.g is None):
            return np.zeros(self.space.n_dofs)
        b = np.zeros(self.space.n_dofs)
        if self.spec.f is not None:
            b += assemble_load(self.space, np.broadcast_to(self.spec.f(self.space.qp_x, t), self.space.qp_w.shape))
        if self.spec.bc == "inflow" and self.spec.g is not None:
            b += assemble_inflow_terms(self.space, self.spec.beta, self.spec.g, t)[1]
        return b

    def f_h(self, t: float) -> Field | None:
        if self.spec.f is None:
            return None
        return interpolate_nodal(self.space, self.spec.f, t)

    def system_matrix(self, switch: SwitchField) -> sp.csr_matrix:
        S0, S1 = s_apply_operator(switch, self.space, self.spec.beta)
        K = self.A + self.params.sigma0 * S0 + self.params.sigma1 * S1
        if self._inflow_matrix is not None:
            K = K + self._inflow_matrix
        return K

    def apply(self, u: np.ndarray, switch: SwitchField) -> np.ndarray:
        """``K(switch) u`` without assembling ``K``."""
        p = self.params
        out = self.A @ u + s_apply_vector(switch, self.space, self.spec.beta, u, p.sigma0, p.sigma1)
        if self._inflow_matrix is not None:
            out += self._inflow_matrix @ u
        return out

    def residual(self, u: np.ndarray, t: float, switch: SwitchField) -> np.ndarray:
        return self.load(t) - self.apply(u, switch)

    def time_derivative(self, u: np.ndarray, t: float, switch: SwitchField, x0=None) -> np.ndarray:
        return self.space.solve_mass(self.residual(u, t, switch), x0=x0)

    def switch(self, u: np.ndarray, t: float, dt_u: np.ndarray | None) -> SwitchField:
        """Switch from state ``u`` using the supplied (lagged) time-derivative estimate."""
        n_el = self.space.n_elements
        if self.frozen_switch is not None:
            return self.frozen_switch
        if not self.params.switch_active:
            return SwitchField.constant(n_el, 0.0, t)
        w = Field(self.space, u, t)
        dt_w = Field(self.space, dt_u, t) if dt_u is not None else None
        r = residual_indicator(w, dt_w, self.f_h(t), self.spec.beta, self.params)
        return switch_field(r, self.space.mesh, self.params, t)


_OPERATORS: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def spatial_residual(u: Field, t: float, switch: SwitchField, spec: ProblemSpec, params: StabParams) -> np.ndarray:
    """``r = b(t) - (A + sigma0 S0 + sigma1 S1 [+ B_in]) u``."""
    cache = _OPERATORS.setdefault(u.space, {})
    key = (spec, params)
    op = cache.get(key)
    if op is None:
        op = cache[key] = TransportOperator(u.space, spec, params)
    return op.residual(u.coefficients, t, switch)


def galerkin_residual_check(
    op: TransportOperator,
    lu_exact: SpaceTimeFn,
    u_h: Field,
    dt_u_h: np.ndarray,
    t: float,
    switch: SwitchField,
) -> float:
    """Max over basis functions of ``a(u - u_h, phi_i) - sigma0 s0 - sigma1 s1`` (plus inflow terms).

    ``lu_exact`` is the strong operator ``dt u + beta.grad u`` of the exact
    solution; ``dt_u_h`` is the time derivative of the discrete trajectory.
    """
    space = op.space
    lu = assemble_load(space, np.broadcast_to(lu_exact(space.qp_x, t), space.qp_w.shape))
    d = lu - space.mass @ dt_u_h - op.system_matrix(switch) @ u_h.coefficients
    if op.spec.bc == "inflow" and op.spec.g is not None:
        d += assemble_inflow_terms(space, op.spec.beta, op.spec.g, t)[1]
    return float(np.abs(d).max())
