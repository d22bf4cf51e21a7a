"""Transported weight functions and the weighted norms built on them.

The weight is ``phi(x, t) = varphi(|x - beta t - x0|)`` with a radial
profile equal to one on a plateau of radius ``r0`` and decaying like
``exp(-(r - r0) / sigma)`` outside, ``sigma = K sqrt(h)``.  A polynomial
smoothstep ramp of width ``blend_width`` joins the two pieces so the
profile is ``C^{k+1}``.  Weights are always evaluated analytically at
quadrature points, never projected.

``phi=None`` anywhere below means the unit weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import cumulative_trapezoid

from .fe_space import DGField, Field, Space, reference_basis
from .mesh import Mesh, RegionMask, peel_boundary_layer
from .projections import dg_gradient_along, l2_project, oswald_average
from .quadrature import composite_triangle_rule
from .stabilization import SwitchField, beta_norm, cip_seminorm_sq, s0_apply, s1_apply


@dataclass(frozen=True)
class WeightSpec:
    """Radial weight centred at ``x0`` at ``t = 0``.

    ``h`` is the mesh size entering ``sigma = K sqrt(h)``; ``order`` is the
    polynomial degree ``k`` fixing the smoothness of the ramp.  ``period``
    switches on minimum-image distances for periodic domains.
    """

    x0: tuple[float, float]
    r0: float
    K: float
    h: float
    blend_width: float | None = None
    order: int = 2
    period: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.K > 1.0:
            raise ValueError(f"K must be > 1, got {self.K}")
        if self.r0 < 0:
            raise ValueError("r0 must be >= 0")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if self.blend_width is not None and not self.blend_width > 0:
            raise ValueError("blend_width must be > 0")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        object.__setattr__(self, "x0", tuple(float(c) for c in self.x0))

    @property
    def sigma(self) -> float:
        return self.K * float(np.sqrt(self.h))

    @property
    def blend(self) -> float:
        return self.blend_width if self.blend_width is not None else self.sigma

    def centre(self, beta, t: float) -> np.ndarray:
        return np.asarray(self.x0) + np.asarray(beta, dtype=float) * t


@lru_cache(maxsize=None)
def _ramp(order: int) -> tuple[Polynomial, Polynomial, Polynomial]:
    """``(S, S', int_0 S)`` for the smoothstep of degree ``2 order + 1``.

    ``S(0) = 0``, ``S(1) = 1``, and derivatives ``1..order`` vanish at both ends.
    """
    n = order
    coef = np.zeros(2 * n + 2)
    for j in range(n + 1):
        coef[n + 1 + j] = comb(n + j, j) * comb(2 * n + 1, n - j) * (-1) ** j
    S = Polynomial(coef)
    return S, S.deriv(), S.integ()


def radial_profile(spec: WeightSpec, r: np.ndarray):
    """``(varphi(r), varphi'(r))``."""
    S, _, IS = _ramp(spec.order)
    b, sig = spec.blend, spec.sigma
    s = np.maximum(np.asarray(r, dtype=float) - spec.r0, 0.0)
    inside = s < b
    z = np.minimum(s / b, 1.0)
    psi = np.where(inside, b * IS(z), s - b * IS(1.0))
    dpsi = np.where(inside, S(z), 1.0)
    val = np.exp(-psi / sig)
    return val, -dpsi / sig * val


def weight_eval(spec: WeightSpec, beta, x: np.ndarray, t: float):
    """``(phi, grad phi, L phi)`` at points ``x`` of shape ``(..., 2)``.

    ``L phi = dt phi + beta . grad phi`` is formed from the chain rule, where
    the time derivative is ``-beta . grad phi`` for the transported centre.
    """
    beta = np.asarray(beta, dtype=float)
    d = np.asarray(x, dtype=float) - spec.centre(beta, t)
    if spec.period is not None:
        p = np.asarray(spec.period, dtype=float)
        d = d - p * np.round(d / p)
    r = np.sqrt(np.einsum("...d,...d->...", d, d))
    val, dval = radial_profile(spec, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[..., None] > 0, d / r[..., None], 0.0)
    grad = dval[..., None] * unit
    adv = grad @ beta
    dt_phi = -adv
    return val, grad, dt_phi + adv


def _phi_values(phi: WeightSpec | None, beta, x, t):
    if phi is None:
        return np.ones(x.shape[:-1])
    return weight_eval(phi, beta, x, t)[0]


def _check_beta(phi, beta):
    if phi is not None and beta is None:
        raise ValueError("a transported weight needs beta")
    return (0.0, 0.0) if beta is None else beta


def _values_at_qp(space: Space, v) -> np.ndarray:
    if isinstance(v, (Field, DGField)):
        return v.values_at_qp()
    if callable(v):
        return np.broadcast_to(v(space.qp_x), space.qp_w.shape)
    return np.broadcast_to(np.asarray(v, dtype=float), space.qp_w.shape)


def _region_sum(per_el: np.ndarray, region: RegionMask | None) -> float:
    if region is None:
        return float(per_el.sum())
    if len(region) != len(per_el):
        raise ValueError("region length does not match the mesh")
    return float(per_el[region.elements].sum())


def weighted_l2(v, phi: WeightSpec | None, t: float, beta=None, region: RegionMask | None = None, space: Space | None = None) -> float:
    """``||phi v||`` over ``region`` (default the whole domain).

    ``v`` is a Field, DGField, callable of points, or an array of values at
    the element quadrature points (then ``space`` is required).
    """
    beta = _check_beta(phi, beta)
    space = space if space is not None else v.space
    vals = _values_at_qp(space, v)
    w = _phi_values(phi, beta, space.qp_x, t)
    return float(np.sqrt(_region_sum(np.einsum("eq,eq->e", space.qp_w, (w * vals) ** 2), region)))


def weighted_l2_error(
    u_h: Field,
    exact: Callable[[np.ndarray, float], np.ndarray],
    phi: WeightSpec | None,
    t: float,
    beta=None,
    region: RegionMask | None = None,
    refine: int = 1,
) -> float:
    """``||phi (exact - u_h)||`` with each element split ``refine**2`` times for the quadrature."""
    beta = _check_beta(phi, beta)
    space = u_h.space
    rule = composite_triangle_rule(2 * space.k + 2, refine)
    basis, _ = reference_basis(space.k, rule.points)
    x = space.physical_points(rule.points)
    uh = u_h.local() @ basis.T
    e = np.broadcast_to(exact(x, t), uh.shape) - uh
    w = _phi_values(phi, beta, x, t)
    per_el = np.abs(space.det)[:, None] * rule.weights[None, :] * (w * e) ** 2
    return float(np.sqrt(_region_sum(per_el.sum(axis=1), region)))


def _facet_phi_sq(space: Space, phi: WeightSpec | None, beta, t):
    if phi is None:
        return None
    x = space.interior_jumps[5]
    return _phi_values(phi, beta, x, t) ** 2


def weighted_seminorm_s(v: Field, phi: WeightSpec | None, t: float, beta) -> float:
    """``|phi v|_s`` computed as ``s0(0; v, phi^2 v)``: gradient jumps of v weighted by phi^2."""
    return float(np.sqrt(cip_seminorm_sq(v, beta, _facet_phi_sq(v.space, phi, beta, t))))


def material_derivative_at_qp(v: Field, dt_v: Field | None, beta) -> np.ndarray:
    """``dt v + beta . grad v`` at the element quadrature points."""
    out = v.grads_at_qp() @ np.asarray(beta, dtype=float)
    if dt_v is not None:
        out = out + dt_v.values_at_qp()
    return out


@dataclass
class NormTerms:
    """Squared building blocks of the weighted norms at one time."""

    t: float
    l2_sq: float
    s_sq: float
    bulk_sq: float  # ||h^{1/2} L v||_phi^2
    diffusion_sq: float  # ||h^{1/2} |beta|^{1/2} varpi^{1/2} grad v||_phi^2
    inv_h_sq: float  # ||h^{-1/2} v||_phi^2

    @property
    def residual_sq(self) -> float:
        return self.s_sq + self.bulk_sq

    @property
    def switch_sq(self) -> float:
        return self.residual_sq + self.diffusion_sq


def norm_terms(v: Field, dt_v: Field | None, phi: WeightSpec | None, t: float, beta, switch: SwitchField | None = None) -> NormTerms:
    space = v.space
    h = space.mesh.element_diameter
    w2 = _phi_values(phi, beta, space.qp_x, t) ** 2
    vals = v.values_at_qp()
    lv = material_derivative_at_qp(v, dt_v, beta)
    l2 = np.einsum("eq,eq->e", space.qp_w, w2 * vals**2)
    bulk = h * np.einsum("eq,eq->e", space.qp_w, w2 * lv**2)
    diff = 0.0
    if switch is not None and np.any(switch.varpi):
        g = v.grads_at_qp()
        per_el = np.einsum("eq,eq->e", space.qp_w, w2 * np.einsum("eqd,eqd->eq", g, g))
        diff = float(np.sum(h * beta_norm(beta) * switch.varpi * per_el))
    return NormTerms(
        t=float(t),
        l2_sq=float(l2.sum()),
        s_sq=float(cip_seminorm_sq(v, beta, _facet_phi_sq(space, phi, beta, t))),
        bulk_sq=float(bulk.sum()),
        diffusion_sq=diff,
        inv_h_sq=float(np.sum(l2 / h)),
    )


def residual_norm(v: Field, dt_v: Field | None, phi: WeightSpec | None, t: float, beta) -> float:
    """``||v||_{R,phi} = (|phi v|_s^2 + ||h^{1/2} L v||_phi^2)^{1/2}``."""
    return float(np.sqrt(norm_terms(v, dt_v, phi, t, beta).residual_sq))


@dataclass(frozen=True)
class NormSample:
    """One time level of a discrete trajectory: state, its time derivative and the switch."""

    t: float
    v: Field
    dt_v: Field | None = None
    switch: SwitchField | None = None


@dataclass
class NormReport:
    l2_phi: float
    s_seminorm_phi: float
    residual_norm_phi: float
    triple_norm_whS_phi: float
    triple_norm_wh_phi: float
    star_norm_phi: float
    t_start: float
    t_end: float
    rows: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("l2_phi", "s_seminorm_phi", "residual_norm_phi", "triple_norm_whS_phi", "triple_norm_wh_phi", "star_norm_phi", "t_start", "t_end")}


def trapezoid_weights(times: Sequence[float]) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    w = np.zeros_like(t)
    if len(t) > 1:
        dt = np.diff(t)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def triple_norms(samples: Sequence[NormSample], phi: WeightSpec | None, beta) -> NormReport:
    """Weighted norms of a trajectory; time integrals by the trapezoid rule over the samples.

    ``l2_phi`` and ``s_seminorm_phi`` refer to the final sample,
    ``residual_norm_phi`` is ``(int ||v||_{R,phi}^2)^{1/2}``.
    """
    if not samples:
        raise ValueError("no samples")
    samples = sorted(samples, key=lambda s: s.t)
    terms = [norm_terms(s.v, s.dt_v, phi, s.t, beta, s.switch) for s in samples]
    w = trapezoid_weights([s.t for s in samples])
    res = float(w @ [x.residual_sq for x in terms])
    sw = float(w @ [x.switch_sq for x in terms])
    inv_h = float(w @ [x.inv_h_sq for x in terms])
    first, last = terms[0], terms[-1]
    wh_sq = last.l2_sq + sw
    rows = [
        {"t": x.t, "l2_phi_sq": x.l2_sq, "s_sq": x.s_sq, "bulk_sq": x.bulk_sq, "diffusion_sq": x.diffusion_sq, "inv_h_sq": x.inv_h_sq}
        for x in terms
    ]
    return NormReport(
        l2_phi=float(np.sqrt(last.l2_sq)),
        s_seminorm_phi=float(np.sqrt(last.s_sq)),
        residual_norm_phi=float(np.sqrt(res)),
        triple_norm_whS_phi=float(np.sqrt(sw)),
        triple_norm_wh_phi=float(np.sqrt(wh_sq)),
        star_norm_phi=float(np.sqrt(first.l2_sq + wh_sq + inv_h)),
        t_start=samples[0].t,
        t_end=samples[-1].t,
        rows=rows,
    )


def stability_test_function(v: Field, dt_v: Field | None, phi: WeightSpec | None, theta: float, t: float = 0.0, beta=(0.0, 0.0)) -> Field:
    """``pi_h phi^2 (v + theta h i_av(dt v + beta . grad v))``."""
    if theta < 0:
        raise ValueError("theta must be >= 0")
    space = v.space
    vals = v.values_at_qp()
    if theta:
        blocks = dg_gradient_along(v, beta).blocks
        if dt_v is not None:
            blocks = blocks + dt_v.local()
        lv = oswald_average(DGField(space, blocks))
        vals = vals + theta * space.mesh.element_diameter[:, None] * lv.values_at_qp()
    w2 = _phi_values(phi, beta, space.qp_x, t) ** 2
    return l2_project(space, w2 * vals)


@dataclass
class StabilityDiagnostic:
    """Both sides of the weighted stability inequality along a trajectory.

    ``lhs = ||v(T)||_phi^2 + c_theta int |||v|||_{y,S,phi}^2`` and
    ``rhs = ||v(0)||_phi^2 + decay_integral C + int 2 (L v, w) + 2 sigma0 s0 + 2 sigma1 s1``
    with ``decay_integral = K^-2 int ||v||_phi^2``.  ``form_integral`` holds
    the ``int 2(...)`` part; the inequality holds with constant ``C`` iff
    ``C >= required_constant``.  The cumulative columns give the same
    quantities over ``[t_0, t_i]``.
    """

    times: np.ndarray
    lhs_no_c: np.ndarray  # ||v(t_i)||^2 + c_theta int_0^{t_i}
    rhs_no_c: np.ndarray  # ||v(0)||^2 + int_0^{t_i} 2(...)
    decay_integral: np.ndarray
    c_theta: float
    theta: float

    @property
    def required_constant(self) -> float:
        """Smallest ``C`` making the inequality hold at the final time."""
        return self._required(-1)

    def _required(self, i) -> float:
        gap = self.lhs_no_c[i] - self.rhs_no_c[i]
        d = self.decay_integral[i]
        if d <= 0.0:
            return 0.0 if gap <= 0 else np.inf
        return float(gap / d)

    def required_constant_series(self) -> np.ndarray:
        return np.array([self._required(i) for i in range(len(self.times))])

    def margin(self, C: float) -> np.ndarray:
        """``rhs - lhs`` on every partial interval ``[t_0, t_i]``."""
        return self.rhs_no_c + C * self.decay_integral - self.lhs_no_c


def default_c_theta(theta: float, sigma0: float, sigma1: float) -> float:
    """Left-side coefficient ``theta min(sigma0, sigma1) / 2``.

    It has to stay below the ratio of the inequality's slack to the triple
    norm, which on rough random trajectories is about 1e-3 for the default
    stabilisation constants independently of h.
    """
    return 0.5 * theta * min(sigma0, sigma1)


def stability_diagnostic(
    samples: Sequence[NormSample],
    phi: WeightSpec | None,
    beta,
    sigma0: float,
    sigma1: float,
    theta: float = 0.1,
    c_theta: float | None = None,
    time_weights: np.ndarray | None = None,
) -> StabilityDiagnostic:
    """Evaluate the weighted stability inequality on a discrete trajectory.

    Every sample needs ``dt_v`` and the switch ``y`` entering ``s0, s1``
    (``None`` means the zero switch).  ``time_weights`` default to the
    trapezoid rule; pass Gauss weights for polynomial-in-time trajectories
    together with samples at ``t_0`` and ``T`` carrying zero weight.
    """
    if c_theta is None:
        c_theta = default_c_theta(theta, sigma0, sigma1)
    times = np.array([s.t for s in samples])
    w_t = trapezoid_weights(times) if time_weights is None else np.asarray(time_weights, dtype=float)
    K = phi.K if phi is not None else np.inf
    inner = np.zeros(len(samples))
    triple = np.zeros(len(samples))
    l2 = np.zeros(len(samples))
    for i, s in enumerate(samples):
        space = s.v.space
        switch = s.switch if s.switch is not None else SwitchField.constant(space.n_elements)
        terms = norm_terms(s.v, s.dt_v, phi, s.t, beta, switch)
        l2[i], triple[i] = terms.l2_sq, terms.switch_sq
        if w_t[i] == 0.0:
            continue
        w = stability_test_function(s.v, s.dt_v, phi, theta, s.t, beta)
        lv = material_derivative_at_qp(s.v, s.dt_v, beta)
        a = float(np.sum(space.qp_w * lv * w.values_at_qp()))
        inner[i] = 2.0 * (a + sigma0 * s0_apply(switch, s.v, w, beta) + sigma1 * s1_apply(switch, s.v, w, beta))
    vals = np.column_stack([triple, inner, l2])
    if time_weights is None:
        cum = cumulative_trapezoid(vals, times, axis=0, initial=0.0)
    else:
        # quadrature weights only integrate over the whole interval; partial sums are indicative
        cum = np.cumsum(w_t[:, None] * vals, axis=0)
    return StabilityDiagnostic(
        times=times,
        lhs_no_c=l2 + c_theta * cum[:, 0],
        rhs_no_c=l2[0] + cum[:, 1],
        decay_integral=cum[:, 2] / K**2,
        c_theta=c_theta,
        theta=theta,
    )


@dataclass(frozen=True)
class RegionSplit:
    smooth: RegionMask
    rough: RegionMask
    smooth_minus: RegionMask
    rough_plus: RegionMask


def region_split_shock(mesh: Mesh, shock_x: float | Callable[[float], float], halo: float, t: float = 0.0) -> RegionSplit:
    """Rough part = elements meeting the strip ``|x - shock_x(t)| <= halo``; smooth part = the rest."""
    if halo < 0:
        raise ValueError("halo must be >= 0")
    xs = float(shock_x(t) if callable(shock_x) else shock_x)
    xv = mesh.vertices[mesh.triangles][..., 0]
    lo, hi = xv.min(axis=1), xv.max(axis=1)
    rough = (hi >= xs - halo) & (lo <= xs + halo)
    R = RegionMask(rough, f"|x - {xs:g}| <= {halo:g}")
    S = R.complement()
    S_minus = peel_boundary_layer(mesh, S)
    return RegionSplit(S, R, S_minus, S_minus.complement())


__all__ = [
    "WeightSpec",
    "radial_profile",
    "weight_eval",
    "weighted_l2",
    "weighted_l2_error",
    "weighted_seminorm_s",
    "residual_norm",
    "norm_terms",
    "NormSample",
    "NormReport",
    "triple_norms",
    "stability_test_function",
    "stability_diagnostic",
    "StabilityDiagnostic",
    "region_split_shock",
    "RegionSplit",
]
