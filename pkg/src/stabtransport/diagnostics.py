"""Ratio studies for the inequalities behind the stability analysis.

Each ratio is "left side / right side" of an inequality that should hold
with a mesh-independent constant.  A study draws random discrete fields on
a sequence of meshes and reports the largest ratio per mesh; the
inequality is credible when that maximum stays bounded under refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fe_space import DGField, Field, Space, build_space
from .mesh import build_structured_mesh
from .projections import dg_gradient_along, oswald_average
from .stabilization import StabParams, SwitchField, cip_seminorm_sq, residual_indicator, s0_apply, s1_apply, switch_field
from .weights import WeightSpec, _facet_phi_sq, _phi_values, material_derivative_at_qp

TINY = 1e-300


def random_field(space: Space, rng: np.random.Generator, scale: float = 1.0) -> Field:
    return Field(space, scale * rng.standard_normal(space.n_dofs))


def random_switch(space: Space, rng: np.random.Generator, params: StabParams, beta) -> SwitchField:
    """Switch computed from a random state so that all regimes of varpi occur."""
    w = random_field(space, rng, scale=10.0 ** rng.uniform(-3, 0))
    dt_w = random_field(space, rng, scale=10.0 ** rng.uniform(-3, 0))
    r = residual_indicator(w, dt_w, None, beta, params)
    return switch_field(r, space.mesh, params)


def s_bound_ratio(v: Field, switch: SwitchField, beta) -> float:
    """``|v|_s^2 / (s0(w; v, v) + s1(w; v, v))``."""
    num = cip_seminorm_sq(v, beta)
    den = s0_apply(switch, v, v, beta) + s1_apply(switch, v, v, beta)
    return num / max(den, TINY)


def cross_term_ratios(v: Field, dt_v: Field, switch: SwitchField, beta, z: Field | None = None) -> tuple[float, float]:
    """``|s_n(w; z, h i_av L v)| / (s_n(w; z, z)^{1/2} ||h^{1/2} L v||)`` for n = 0, 1.

    Without ``z`` the worst partner ``z = h i_av L v`` is used (the supremum
    over z by Cauchy-Schwarz); random partners decorrelate from ``L v`` on
    fine meshes and understate the constant.
    """
    space = v.space
    h = space.mesh.element_diameter
    blocks = dg_gradient_along(v, beta).blocks + dt_v.local()
    iav = oswald_average(DGField(space, blocks))
    # h is elementwise; use its nodal average (exact on uniform meshes)
    count = np.bincount(space.dof_map.ravel(), minlength=space.n_dofs)
    h_nodal = np.bincount(space.dof_map.ravel(), weights=np.repeat(h, space.n_local), minlength=space.n_dofs) / count
    y = Field(space, h_nodal * iav.coefficients)
    z = y if z is None else z
    lv = material_derivative_at_qp(v, dt_v, beta)
    lv_norm = np.sqrt(np.sum(h[:, None] * space.qp_w * lv**2))
    out = []
    for form in (s0_apply, s1_apply):
        zz = form(switch, z, z, beta)
        if zz <= 0.0:
            out.append(0.0)
            continue
        out.append(abs(form(switch, z, y, beta)) / max(np.sqrt(zz) * lv_norm, TINY))
    return out[0], out[1]


def inverse_ratio(v: Field, phi: WeightSpec | None, beta) -> float:
    """``h^{1/2} |phi v|_s / (|beta|^{1/2} ||phi v||)``."""
    space = v.space
    s = np.sqrt(cip_seminorm_sq(v, beta, _facet_phi_sq(space, phi, beta, 0.0)))
    w2 = _phi_values(phi, beta, space.qp_x, 0.0) ** 2
    l2 = np.sqrt(np.sum(space.qp_w * w2 * v.values_at_qp() ** 2))
    h = space.mesh.global_h
    return float(np.sqrt(h) * s / max(np.sqrt(np.hypot(*beta)) * l2, TINY))


def oswald_weighted_ratio(v: Field, phi: WeightSpec | None, beta) -> float:
    """``||h^{1/2}(i_av(beta.grad v) - beta.grad v)||_phi^2 / sum_F h^2 |beta| ||phi [grad v . n]||_F^2``."""
    space = v.space
    dg = dg_gradient_along(v, beta)
    diff = oswald_average(dg).values_at_qp() - dg.values_at_qp()
    w2 = _phi_values(phi, beta, space.qp_x, 0.0) ** 2
    h = space.mesh.element_diameter
    num = np.sum(h[:, None] * space.qp_w * w2 * diff**2)
    # cip_seminorm_sq carries h_L^2 + h_R^2 = 2 h^2 on a uniform mesh
    den = 0.5 * cip_seminorm_sq(v, beta, _facet_phi_sq(space, phi, beta, 0.0))
    return float(num / max(den, TINY))


@dataclass
class RatioStudy:
    name: str
    sizes: list[int]
    max_ratio: list[float]

    @property
    def spread(self) -> float:
        """Largest relative deviation of a per-mesh maximum from the first one."""
        base = self.max_ratio[0]
        return max(abs(r - base) / base for r in self.max_ratio) if base > 0 else np.inf

    def stable(self, band: float = 0.5) -> bool:
        return bool(np.all(np.isfinite(self.max_ratio)) and self.spread <= band)


def ratio_studies(
    sizes=(8, 16, 32),
    k: int = 2,
    n_samples: int = 200,
    beta=(1.0, 0.5),
    params: StabParams | None = None,
    weight: dict | None = None,
    seed: int = 0,
) -> dict[str, RatioStudy]:
    """Run every ratio study on periodic unit-square meshes."""
    params = params or StabParams()
    weight = weight or {"x0": (0.5, 0.5), "r0": 0.15, "K": 1.5}
    rng = np.random.default_rng(seed)
    names = ("s_bound", "cross_s0", "cross_s1", "inverse_weighted", "oswald_weighted")
    result = {n: RatioStudy(n, list(sizes), []) for n in names}
    for n in sizes:
        space = build_space(build_structured_mesh(n, n, periodic=(True, True)), k)
        phi = WeightSpec(h=space.mesh.global_h, order=k, period=(1.0, 1.0), **weight)
        vals = {name: [] for name in names}
        for _ in range(n_samples):
            sw = random_switch(space, rng, params, beta)
            v, dt_v = random_field(space, rng), random_field(space, rng)
            vals["s_bound"].append(s_bound_ratio(v, sw, beta))
            c0, c1 = cross_term_ratios(v, dt_v, sw, beta)
            vals["cross_s0"].append(c0)
            vals["cross_s1"].append(c1)
            vals["inverse_weighted"].append(inverse_ratio(v, phi, beta))
            vals["oswald_weighted"].append(oswald_weighted_ratio(v, phi, beta))
        for name in names:
            result[name].max_ratio.append(float(np.max(vals[name])))
    return result
