"""Explicit SSP-RK3 method-of-lines driver with the lagged switch protocol."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fe_space import Field, Space, interpolate_nodal
from .mesh import Mesh
from .stabilization import SwitchField, beta_norm, s_apply_vector
from .transport import TransportOperator

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ("step", "t", "dt", "mass", "energy", "linf", "max_varpi", "n_active_elements")
BLOWUP_FACTOR = 1e10


@dataclass
class TimeStepperConfig:
    t_end: float
    cfl: float = 0.3
    dt_override: float | None = None
    snapshot_times: list[float] = field(default_factory=list)
    scheme: str = "ssp_rk3"
    active_threshold: float = 0.01
    spectral_cap: bool = True

    def __post_init__(self):
        if self.scheme != "ssp_rk3":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.dt_override is not None and self.dt_override <= 0:
            raise ValueError("dt_override must be positive")


def stable_dt(mesh: Mesh | float, beta, k: int, cfl: float) -> float:
    """``cfl * h_min / (|beta| (2k + 1))``; ``mesh`` may also be ``h_min`` itself."""
    h_min = mesh.h_min if isinstance(mesh, Mesh) else float(mesh)
    b = beta_norm(beta)
    if b == 0.0:
        raise ValueError("|beta| = 0: no CFL limit, give dt_override")
    return cfl * h_min / (b * (2 * k + 1))


# extent of the SSP-RK3 stability region along the negative real and the imaginary axis
RK3_REAL_EXTENT = 2.51
RK3_IMAG_EXTENT = 1.73


def _power_iteration(apply, n: int, iters: int = 200, seed: int = 0) -> float:
    x = np.random.default_rng(seed).standard_normal(n)
    lam = 0.0
    for _ in range(iters):
        y = apply(x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        lam_new = norm / np.linalg.norm(x)
        x = y / norm
        if abs(lam_new - lam) <= 1e-4 * lam_new:
            return lam_new
        lam = lam_new
    return lam


def spectral_dt(op: TransportOperator, safety: float = 0.9) -> float:
    """Largest step keeping the stabilised semi-discrete spectrum inside the RK3 region.

    The dissipative part is bounded by ``sigma0 S0(varpi=0) + sigma1 S1(varpi=1)``,
    which dominates the operator for every switch; the advective part by the
    spectral radius of ``M^-1 A``.  Both radii come from power iteration.
    """
    space = op.space
    n = space.n_dofs
    lo = SwitchField.constant(space.n_elements, 0.0)
    hi = SwitchField.constant(space.n_elements, 1.0)
    p = op.params

    def diss(x):
        y = s_apply_vector(lo, space, op.spec.beta, x, p.sigma0, 0.0)
        y += s_apply_vector(hi, space, op.spec.beta, x, 0.0, p.sigma1)
        return space.solve_mass(y)

    def adv_sq(x):
        y = space.solve_mass(op.A @ x)
        return space.solve_mass(op.A.T @ y)

    rho_s = _power_iteration(diss, n)
    rho_a = np.sqrt(_power_iteration(adv_sq, n))
    denom = rho_s / RK3_REAL_EXTENT + rho_a / RK3_IMAG_EXTENT
    return np.inf if denom == 0.0 else safety / denom


class Stepper:
    """Holds the lagged switch and the previous time derivative between stages."""

    def __init__(self, op: TransportOperator):
        self.op = op
        self.switch = SwitchField.constant(op.space.n_elements, 0.0)
        self._x0 = None

    def rhs(self, u: np.ndarray, t: float) -> np.ndarray:
        op = self.op
        lagged = op.time_derivative(u, t, self.switch, x0=self._x0)
        self.switch = op.switch(u, t, lagged)
        if op.frozen_switch is not None or not op.params.switch_active:
            du = lagged
        else:
            du = op.time_derivative(u, t, self.switch, x0=lagged)
        self._x0 = du
        return du

    def step(self, u: np.ndarray, t: float, dt: float) -> np.ndarray:
        u1 = u + dt * self.rhs(u, t)
        u2 = 0.75 * u + 0.25 * (u1 + dt * self.rhs(u1, t + dt))
        u3 = u / 3.0 + 2.0 / 3.0 * (u2 + dt * self.rhs(u2, t + 0.5 * dt))
        if not np.all(np.isfinite(u3)):
            raise FloatingPointError(f"non-finite state after step at t={t + dt}")
        return u3


def step_ssp_rk3(u: Field, t: float, dt: float, op: TransportOperator, stepper: Stepper | None = None) -> Field:
    stepper = stepper if stepper is not None else Stepper(op)
    return Field(u.space, stepper.step(u.coefficients, t, dt), t + dt)


@dataclass
class Trajectory:
    snapshots: dict[float, Field]
    switches: dict[float, SwitchField]
    diagnostics: list[dict]
    final: Field

    def write_diagnostics(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
            w.writeheader()
            for row in self.diagnostics:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _diagnostics(space: Space, step, t, dt, u, switch, threshold):
    Mu = space.mass @ u
    return {
        "step": step,
        "t": float(t),
        "dt": float(dt),
        "mass": float(Mu.sum()),
        "energy": float(0.5 * u @ Mu),
        "linf": float(np.abs(u).max()),
        "max_varpi": float(switch.varpi.max()),
        "n_active_elements": int((switch.varpi > threshold).sum()),
    }


def run(
    op: TransportOperator,
    config: TimeStepperConfig,
    u_init: Field | None = None,
    observer: Callable[[int, float, np.ndarray, Stepper], None] | None = None,
) -> Trajectory:
    """Integrate from ``t = 0`` to ``config.t_end`` landing exactly on every snapshot time.

    ``observer(step, t, u, stepper)`` is called on the initial state and
    after every step.
    """
    space = op.space
    u = (u_init if u_init is not None else interpolate_nodal(space, op.spec.u0)).coefficients.copy()
    if config.dt_override:
        dt_max = config.dt_override
    else:
        dt_max = stable_dt(space.mesh, op.spec.beta, space.k, config.cfl)
        if config.spectral_cap:
            dt_spec = spectral_dt(op)
            if dt_spec < dt_max:
                logger.info("time step capped by the stabilisation spectrum: %.3e -> %.3e", dt_max, dt_spec)
                dt_max = dt_spec
    stops = sorted({float(s) for s in config.snapshot_times if 0.0 <= s <= config.t_end} | {float(config.t_end)})
    u0_inf = max(np.abs(u).max(), 1e-300)

    stepper = Stepper(op)
    snapshots, switches, diags = {}, {}, []
    t, n = 0.0, 0
    if observer is not None:
        observer(0, t, u, stepper)
    diags.append(_diagnostics(space, 0, t, 0.0, u, stepper.switch, config.active_threshold))
    for stop in stops:
        while t < stop:
            remaining = stop - t
            dt = dt_max
            if remaining <= dt_max * (1.0 + 1e-9):
                dt = remaining
            u = stepper.step(u, t, dt)
            t = stop if dt == remaining else t + dt
            n += 1
            if np.abs(u).max() > BLOWUP_FACTOR * u0_inf:
                raise FloatingPointError(f"blow-up detected at t={t} (step {n})")
            diags.append(_diagnostics(space, n, t, dt, u, stepper.switch, config.active_threshold))
            if observer is not None:
                observer(n, t, u, stepper)
        if stop in config.snapshot_times or stop == config.t_end:
            snapshots[stop] = Field(space, u.copy(), stop)
            lagged = op.time_derivative(u, stop, stepper.switch)
            switches[stop] = op.switch(u, stop, lagged)
    return Trajectory(snapshots, switches, diags, Field(space, u.copy(), t))
