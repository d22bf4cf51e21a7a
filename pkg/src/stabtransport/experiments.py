"""Experiment runners behind the command line.

Each runner takes a validated :class:`ExperimentConfig`, writes its
outputs (CSV tables, VTK snapshots, ``report.json``) into the output
directory and returns the report.  A report holds one entry per checked
criterion; ``asserted`` entries decide the exit status.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import roots_legendre

from .config import ExperimentConfig, as_jsonable, write_resolved
from .diagnostics import ratio_studies
from .fe_space import Field, Space, build_space
from .mesh import build_structured_mesh
from .projections import l2_project
from .stabilization import StabParams, SwitchField, beta_norm, residual_indicator, switch_field
from .timestepping import Stepper, TimeStepperConfig, Trajectory, run
from .transport import ProblemSpec, TransportOperator
from .vtk import write_vtk
from .weights import (
    NormSample,
    WeightSpec,
    material_derivative_at_qp,
    norm_terms,
    region_split_shock,
    stability_diagnostic,
    trapezoid_weights,
    weight_eval,
    weighted_l2_error,
)

logger = logging.getLogger(__name__)


# {{{ report plumbing


@dataclass
class Criterion:
    name: str
    passed: bool
    asserted: bool = True
    details: dict = field(default_factory=dict)


@dataclass
class Report:
    experiment: str
    criteria: list[Criterion] = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def add(self, name: str, passed: bool, asserted: bool = True, **details) -> Criterion:
        c = Criterion(name, bool(passed), asserted, details)
        self.criteria.append(c)
        return c

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.criteria if c.asserted)

    def to_dict(self) -> dict:
        return as_jsonable(
            {
                "experiment": self.experiment,
                "ok": self.ok,
                "criteria": [{"name": c.name, "passed": c.passed, "asserted": c.asserted, **c.details} for c in self.criteria],
                "data": self.data,
            }
        )

    def write(self, out: Path):
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n")

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.criteria:
            tag = "PASS" if c.passed else "FAIL"
            if not c.asserted:
                tag = f"info ({tag.lower()})"
            lines.append(f"[{tag}] {c.name}")
        return lines


def write_csv(path: Path, rows: list[dict], skip=("runtime_s",)):
    """Rows as CSV with round-trip float formatting; wall-clock columns stay out so reruns are byte-identical."""
    rows = [{k: v for k, v in r.items() if k not in skip} for r in rows]
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def rates(errors: list[float], hs: list[float]) -> list[float]:
    out = [float("nan")]
    for i in range(1, len(errors)):
        if errors[i] > 0 and errors[i - 1] > 0:
            out.append(float(np.log(errors[i - 1] / errors[i]) / np.log(hs[i - 1] / hs[i])))
        else:
            out.append(float("nan"))
    return out


# }}}

# {{{ problem set-up


@dataclass
class Problem:
    spec: ProblemSpec
    exact: Callable[[np.ndarray, float], np.ndarray]
    exact_grad: Callable[[np.ndarray, float], np.ndarray] | None
    u0_inf: float


def build_problem(cfg: ExperimentConfig) -> Problem:
    p = cfg.problem
    beta = np.asarray(p.beta, dtype=float)
    x0, x1, y0, y1 = cfg.mesh.domain
    lx, ly = x1 - x0, y1 - y0
    if p.initial == "sine":
        kx, ky = 2 * np.pi / lx, 2 * np.pi / ly

        def exact(x, t):
            z = x - beta * t
            return np.sin(kx * z[..., 0]) * np.sin(ky * z[..., 1])

        def exact_grad(x, t):
            z = x - beta * t
            sx, sy = np.sin(kx * z[..., 0]), np.sin(ky * z[..., 1])
            cx, cy = np.cos(kx * z[..., 0]), np.cos(ky * z[..., 1])
            return np.stack([kx * cx * sy, ky * sx * cy], axis=-1)

        u0_inf = 1.0
    elif p.initial == "step":
        xs, val = p.step_position, p.inflow_value

        def exact(x, t):
            return np.where(x[..., 0] - beta[0] * t < xs, val, 0.0)

        exact_grad = None
        u0_inf = abs(val)
    else:
        val = p.inflow_value

        def exact(x, t):
            return np.full(x.shape[:-1], val)

        def exact_grad(x, t):
            return np.zeros(x.shape)

        u0_inf = abs(val)
    g = None
    if p.bc == "inflow":
        g = exact
    spec = ProblemSpec(
        beta=tuple(p.beta),
        u0=lambda x: exact(x, 0.0),
        g=g,
        bc=p.bc,
        T_final=p.t_final,
        exact=exact,
    )
    return Problem(spec, exact, exact_grad, u0_inf)


def stab_params(cfg: ExperimentConfig, problem: Problem, **over) -> StabParams:
    s = cfg.stabilisation
    U = s.U if s.U is not None else 0.5 * beta_norm(cfg.problem.beta) * max(problem.u0_inf, 1e-12)
    kw = dict(sigma0=s.sigma0, sigma1=s.sigma1, alpha=s.alpha, U=U, rho1=s.rho1, rho2=s.rho2)
    kw.update(over)
    return StabParams(**kw)


def build_mesh_space(cfg: ExperimentConfig, n: int, k: int | None = None) -> Space:
    nx, ny = cfg.mesh.cells(n)
    mesh = build_structured_mesh(nx, ny, domain=tuple(cfg.mesh.domain), periodic=tuple(cfg.mesh.periodic))
    return build_space(mesh, cfg.k if k is None else k)


def stepper_config(cfg: ExperimentConfig, t_end: float | None = None, snapshots=None) -> TimeStepperConfig:
    t = cfg.time
    return TimeStepperConfig(
        t_end=cfg.problem.t_final if t_end is None else t_end,
        cfl=t.cfl,
        dt_override=t.dt_override,
        snapshot_times=list(t.snapshot_times if snapshots is None else snapshots),
        spectral_cap=t.spectral_cap,
    )


def state_derivative(op: TransportOperator, u: np.ndarray, t: float, stepper: Stepper):
    """``(dt u, switch)`` at a step state following the per-stage lag protocol."""
    lag = op.time_derivative(u, t, stepper.switch)
    sw = op.switch(u, t, lag)
    if op.frozen_switch is not None or not op.params.switch_active:
        return lag, sw
    return op.time_derivative(u, t, sw, x0=lag), sw


def l2_error(u: Field, exact, t: float, refine: int = 1) -> float:
    return weighted_l2_error(u, exact, None, t, refine=refine)


def export_snapshots(out: Path, traj: Trajectory, prefix: str = "", extra_cells: Callable[[float], dict] | None = None):
    for t, u in traj.snapshots.items():
        space = u.space
        write_vtk(out / f"{prefix}fields_t{t:g}.vtk", space, {"u_h": u})
        sw = traj.switches.get(t)
        if sw is not None:
            cells = {"varpi": sw.varpi, "R_T": sw.r_t}
            if extra_cells is not None:
                cells.update(extra_cells(t))
            write_vtk(out / f"{prefix}switch_t{t:g}.vtk", space, cell_data=cells)


# }}}

# {{{ solve


def run_solve(cfg: ExperimentConfig, out: Path) -> Report:
    problem = build_problem(cfg)
    space = build_mesh_space(cfg, cfg.mesh.sizes[0])
    op = TransportOperator(space, problem.spec, stab_params(cfg, problem))
    rep = Report("solve")
    try:
        traj = run(op, stepper_config(cfg))
    except FloatingPointError as exc:
        rep.add("no blow-up", False, message=str(exc))
        return rep
    traj.write_diagnostics(out / "diagnostics.csv")
    export_snapshots(out, traj)
    T = cfg.problem.t_final
    err = l2_error(traj.final, problem.exact, T, refine=1 if cfg.problem.initial != "step" else 4)
    rep.add("no blow-up", True)
    rep.data.update(n_dofs=space.n_dofs, steps=len(traj.diagnostics) - 1, l2_error=err)
    return rep


# }}}

# {{{ convergence


def _switch_error_norm_sq(u: Field, du: np.ndarray, sw: SwitchField, problem: Problem, t: float, beta) -> float:
    """``||u - u_h||_{u_h,S}^2`` for smooth exact solutions with ``f = 0``."""
    space = u.space
    terms = norm_terms(u, Field(space, du), None, t, beta)  # jumps and bulk see only u_h for smooth u
    h = space.mesh.element_diameter
    ge = problem.exact_grad(space.qp_x, t) - u.grads_at_qp()
    diff = np.sum(h * beta_norm(beta) * sw.varpi * np.einsum("eq,eqd,eqd->e", space.qp_w, ge, ge))
    return terms.s_sq + terms.bulk_sq + float(diff)


def convergence_table(cfg: ExperimentConfig, k: int, params_over: dict | None = None, norm_every: int = 4) -> list[dict]:
    problem = build_problem(cfg)
    beta = cfg.problem.beta
    T = cfg.problem.t_final
    rows = []
    for n in cfg.mesh.sizes:
        space = build_mesh_space(cfg, n, k)
        op = TransportOperator(space, problem.spec, stab_params(cfg, problem, **(params_over or {})))
        samples_t, samples_v = [], []
        track = problem.exact_grad is not None

        def obs(step, t, u, stepper):
            if track and (step % norm_every == 0 or abs(t - T) < 1e-14):
                du, sw = state_derivative(op, u, t, stepper)
                samples_t.append(t)
                samples_v.append(_switch_error_norm_sq(Field(space, u), du, sw, problem, t, beta))

        t0 = time.perf_counter()
        traj = run(op, stepper_config(cfg, snapshots=[]), observer=obs)
        wall = time.perf_counter() - t0
        err = l2_error(traj.final, problem.exact, T)
        snorm = float(np.sqrt(trapezoid_weights(samples_t) @ samples_v)) if track else float("nan")
        rows.append(
            {
                "k": k,
                "n": n,
                "h": space.mesh.global_h,
                "n_dofs": space.n_dofs,
                "steps": len(traj.diagnostics) - 1,
                "dt": traj.diagnostics[1]["dt"] if len(traj.diagnostics) > 1 else 0.0,
                "l2_error": err,
                "switch_norm_error": snorm,
                "max_varpi": max(d["max_varpi"] for d in traj.diagnostics),
                "runtime_s": wall,
            }
        )
        logger.info("k=%d n=%d: L2 error %.3e (%.1f s)", k, n, err, wall)
    hs = [r["h"] for r in rows]
    for key in ("l2_error", "switch_norm_error"):
        for r, rate in zip(rows, rates([r[key] for r in rows], hs)):
            r[key.replace("error", "rate")] = rate
    return rows


def run_convergence(cfg: ExperimentConfig, out: Path) -> Report:
    rep = Report("convergence")
    all_rows = []
    t0 = time.perf_counter()
    for k in cfg.convergence.degrees:
        rows = convergence_table(cfg, k)
        all_rows += rows
        errs = [r["l2_error"] for r in rows]
        rate = rows[-1]["l2_rate"]
        target = cfg.convergence.min_rate.get(str(k))
        if target is not None:
            rep.add(f"smooth convergence k={k}: L2 rate {rate:.2f} >= {target}", rate >= target, rate=rate, target=target, errors=errs)
        else:
            rep.add(f"smooth convergence k={k}: L2 rate {rate:.2f}", True, asserted=False, rate=rate, errors=errs)
        monotone = all(b < a for a, b in zip(errs, errs[1:]))
        rep.add(f"k={k}: error sequence monotone", monotone, asserted=False)
        rep.add(f"k={k}: switch live", max(r["max_varpi"] for r in rows) > 0.0, asserted=False)
    wall = time.perf_counter() - t0
    rep.add(f"convergence runtime {wall:.0f} s <= {cfg.convergence.max_runtime:.0f} s", wall <= cfg.convergence.max_runtime, runtime=wall)
    if cfg.convergence.full_diffusion_control:
        for k in cfg.convergence.degrees:
            rows = convergence_table(cfg, k, params_over={"U": 1e-12})
            for r in rows:
                r["control"] = "full_diffusion"
            all_rows += rows
            rep.add(f"full artificial diffusion k={k}: L2 rate {rows[-1]['l2_rate']:.2f}", True, asserted=False, rate=rows[-1]["l2_rate"])
    for r in all_rows:
        r.setdefault("control", "")
    write_csv(out / "rates.csv", all_rows)
    rep.data["rows"] = all_rows
    return rep


# }}}

# {{{ shock


def _crossing_elements(space: Space, x_line: float) -> np.ndarray:
    xv = space.mesh.vertices[space.mesh.triangles][..., 0]
    return (xv.min(axis=1) < x_line) & (xv.max(axis=1) > x_line)


def switch_checks(space: Space, sw: SwitchField, params: StabParams, x_line: float, far_cells: float, far_tol: float, compare_alpha: float) -> dict:
    """Switch pattern at a snapshot: saturation on the shock line, quiet far away, monotone in alpha."""
    mesh = space.mesh
    h = mesh.element_diameter
    cross = _crossing_elements(space, x_line)
    far = np.abs(mesh.centroids[:, 0] - x_line) > far_cells * h
    base = np.minimum(1.0, h * sw.r_t / params.U)
    other = switch_field(sw.r_t, mesh, replace(params, alpha=compare_alpha))
    sel = base <= 1.0
    return {
        "crossing_min_varpi": float(sw.varpi[cross].min()) if cross.any() else float("nan"),
        "crossing_min_base": float(base[cross].min()) if cross.any() else float("nan"),
        "n_crossing": int(cross.sum()),
        "far_max_varpi": float(sw.varpi[far].max()) if far.any() else 0.0,
        "monotone_in_alpha": bool(np.all(sw.varpi[sel] <= other.varpi[sel] + 1e-15)) if params.alpha >= compare_alpha else bool(np.all(sw.varpi[sel] >= other.varpi[sel] - 1e-15)),
        "compare_varpi": other.varpi,
        "cross_ok": bool(cross.any() and np.all(sw.varpi[cross] >= 1.0)),
        "far_ok": bool(not far.any() or sw.varpi[far].max() <= far_tol),
    }


def run_shock(cfg: ExperimentConfig, out: Path) -> Report:
    problem = build_problem(cfg)
    sc = cfg.shock
    T = cfg.problem.t_final
    beta = np.asarray(cfg.problem.beta)
    rep = Report("shock")
    xs0 = cfg.problem.step_position
    ts = sc.switch_time
    snaps = sorted(set(cfg.time.snapshot_times) | {ts, T})
    probes = []
    for n in cfg.mesh.sizes:
        space = build_mesh_space(cfg, n)
        params = stab_params(cfg, problem)
        # L2 projection of the step: the Gibbs over/undershoot the sensor has to catch
        u_int = l2_project(space, lambda x: problem.exact(x, 0.0)).coefficients
        results = {}
        for name, frozen in (("plain_cip", SwitchField.constant(space.n_elements)), ("combined", None)):
            op = TransportOperator(space, problem.spec, params, frozen_switch=frozen)
            try:
                traj = run(op, stepper_config(cfg, snapshots=snaps))
            except FloatingPointError as exc:
                rep.add(f"n={n} {name}: no blow-up", False, message=str(exc))
                results[name] = None
                continue
            u = traj.final.coefficients
            results[name] = traj
            over, under = float(u.max() - 1.0), float(-u.min())
            rep.data[f"n{n}_{name}"] = {"overshoot": over, "undershoot": under, "steps": len(traj.diagnostics) - 1}
            prefix = f"n{n}_{name}_" if len(cfg.mesh.sizes) > 1 else f"{name}_"
            traj.write_diagnostics(out / f"{prefix}diagnostics.csv")
            if name == "combined":
                cmp = lambda t, tr=traj: {f"varpi_alpha{sc.compare_alpha:g}": switch_field(tr.switches[t].r_t, space.mesh, replace(params, alpha=sc.compare_alpha)).varpi}
                export_snapshots(out, traj, prefix=prefix if len(cfg.mesh.sizes) > 1 else "", extra_cells=cmp)
                if len(cfg.mesh.sizes) == 1:
                    traj.write_diagnostics(out / "diagnostics.csv")
            else:
                export_snapshots(out, traj, prefix=prefix)
        if results.get("plain_cip") is None or results.get("combined") is None:
            continue
        rep.add(f"n={n}: no blow-up (plain CIP and combined)", True)
        oc = rep.data[f"n{n}_combined"]["overshoot"]
        op_ = rep.data[f"n{n}_plain_cip"]["overshoot"]
        rep.add(f"n={n}: combined overshoot {oc:.4f} < plain CIP overshoot {op_:.4f}", oc < op_, combined=oc, plain=op_)
        gibbs = max(u_int.max() - 1.0, -u_int.min())
        rep.add(f"n={n}: projected initial step over/undershoot (Gibbs control) {gibbs:.3f} > 0", gibbs > 0.0, asserted=False, gibbs=gibbs)
        comb = results["combined"]
        space_c = comb.final.space
        upstream = space_c.dof_coords[:, 0] < sc.probe_x
        probe = float(np.abs(comb.final.coefficients[upstream] - 1.0).max()) if upstream.any() else float("nan")
        probes.append(probe)
        rep.add(f"n={n}: upstream probe max|u_h - 1| (x < {sc.probe_x}) = {probe:.2e}", True, asserted=False, probe=probe)
        chk = switch_checks(space_c, comb.switches[ts], params, xs0 + beta[0] * ts, sc.far_cells, sc.far_tolerance, sc.compare_alpha)
        rep.add(
            f"n={n}: varpi = 1 on all {chk['n_crossing']} elements crossing the shock at t={ts:g} (min varpi {chk['crossing_min_varpi']:.3f}, min h R/U {chk['crossing_min_base']:.3f})",
            chk["cross_ok"],
            min_varpi=chk["crossing_min_varpi"],
            min_base=chk["crossing_min_base"],
        )
        rep.add(f"n={n}: varpi <= {sc.far_tolerance} beyond {sc.far_cells:g}h from the shock (max {chk['far_max_varpi']:.2e})", chk["far_ok"])
        rep.add(f"n={n}: varpi(alpha={params.alpha:g}) vs varpi(alpha={sc.compare_alpha:g}) monotone where h R/U <= 1", chk["monotone_in_alpha"])
    if len(probes) > 1:
        dec = all(b <= a for a, b in zip(probes, probes[1:]))
        rep.add("upstream probe decreases with h", dec, asserted=False, probes=probes)
    return rep


# }}}

# {{{ localisation


def weight_for(cfg: ExperimentConfig, space: Space, x0=None, r0=None) -> WeightSpec:
    w = cfg.weight
    period = tuple(space.mesh.period) if all(space.mesh.periodic) else None
    return WeightSpec(
        x0=tuple(w.x0 if x0 is None else x0),
        r0=w.r0 if r0 is None else r0,
        K=w.K,
        h=space.mesh.global_h,
        blend_width=w.blend_width,
        order=space.k,
        period=period,
    )


def decay_check(space: Space, phi: WeightSpec, beta, shock_x: Callable[[float], float], halo: float, times) -> float:
    """Largest ``phi / h^{k+d/2}`` over quadrature points of the rough region at the given times."""
    bound = space.mesh.global_h ** (space.k + 1)
    worst = 0.0
    for t in times:
        split = region_split_shock(space.mesh, shock_x, halo, t)
        if not split.rough.elements.any():
            continue
        vals = weight_eval(phi, beta, space.qp_x[split.rough.elements], t)[0]
        worst = max(worst, float(vals.max()) / bound)
    return worst


class DecayViolation(ValueError):
    pass


def run_localisation(cfg: ExperimentConfig, out: Path) -> Report:
    problem = build_problem(cfg)
    lc = cfg.localisation
    beta = np.asarray(cfg.problem.beta)
    T = cfg.problem.t_final
    xs0 = cfg.problem.step_position
    shock_x = lambda t: xs0 + beta[0] * t
    y0, y1 = cfg.mesh.domain[2:]
    control_x0 = lc.control_x0 if lc.control_x0 is not None else [xs0, 0.5 * (y0 + y1)]
    rep = Report("localisation")
    # weight placement is checked before any solve
    for n in cfg.mesh.sizes:
        space = build_mesh_space(cfg, n)
        ratio = decay_check(space, weight_for(cfg, space), beta, shock_x, lc.halo_cells * space.mesh.global_h, np.linspace(0.0, T, 5))
        if ratio > 1.0:
            raise DecayViolation(f"weight decay invariant violated on n={n}: max phi on the rough region is {ratio:.3g} h^(k+d/2)")
    rows = []
    for alpha in lc.alphas:
        for n in cfg.mesh.sizes:
            space = build_mesh_space(cfg, n)
            h = space.mesh.global_h
            op = TransportOperator(space, problem.spec, stab_params(cfg, problem, alpha=alpha))
            t0 = time.perf_counter()
            traj = run(op, stepper_config(cfg, snapshots=[]))
            phi = weight_for(cfg, space)
            ctrl = weight_for(cfg, space, x0=control_x0, r0=lc.control_r0)
            rows.append(
                {
                    "alpha": alpha,
                    "n": n,
                    "h": h,
                    "weighted_error": weighted_l2_error(traj.final, problem.exact, phi, T, beta, refine=lc.refine),
                    "global_error": weighted_l2_error(traj.final, problem.exact, None, T, refine=lc.refine),
                    "control_error": weighted_l2_error(traj.final, problem.exact, ctrl, T, beta, refine=lc.refine),
                    "max_phi_rough_over_bound": decay_check(space, phi, beta, shock_x, lc.halo_cells * h, [T]),
                    "extra_term_scaling": h ** ((2 + alpha) / (2 - alpha)) if alpha < 2 else 0.0,
                    "runtime_s": time.perf_counter() - t0,
                }
            )
    for alpha in lc.alphas:
        sub = [r for r in rows if r["alpha"] == alpha]
        hs = [r["h"] for r in sub]
        for key in ("weighted", "global", "control"):
            for r, rate in zip(sub, rates([r[f"{key}_error"] for r in sub], hs)):
                r[f"{key}_rate"] = rate
        wr = min(r["weighted_rate"] for r in sub[1:])
        gr = max(r["global_rate"] for r in sub[1:])
        cr = max(r["control_rate"] for r in sub[1:])
        asserted = alpha == lc.asserted_alpha
        target = lc.min_weighted_rate if alpha >= 2 else min(cfg.k + 0.5, 1.5)
        rep.add(f"alpha={alpha:g}: weighted L2 rate {wr:.2f} >= {target}", wr >= target, asserted=asserted, rates=[r["weighted_rate"] for r in sub])
        rep.add(f"alpha={alpha:g}: global L2 rate {gr:.2f} <= {lc.max_global_rate}", gr <= lc.max_global_rate, asserted=asserted, rates=[r["global_rate"] for r in sub])
        rep.add(f"alpha={alpha:g}: weight on the shock (control) rate {cr:.2f} < {lc.max_control_rate}", cr < lc.max_control_rate, asserted=asserted, rates=[r["control_rate"] for r in sub])
    write_csv(out / "rates.csv", rows)
    rep.data["rows"] = rows
    return rep


# }}}

# {{{ stability diagnostic


def random_polynomial_trajectory(space: Space, rng: np.random.Generator, params: StabParams, beta, T: float, degree: int, n_time: int):
    """Random ``v(t) = sum_j c_j t^j`` sampled at Gauss points, with the end points at zero weight."""
    coef = rng.standard_normal((degree + 1, space.n_dofs)) * 10.0 ** rng.uniform(-2, 0, size=(degree + 1, 1))
    xg, wg = roots_legendre(n_time)
    times = np.concatenate([[0.0], 0.5 * T * (xg + 1.0), [T]])
    weights = np.concatenate([[0.0], 0.5 * T * wg, [0.0]])
    samples = []
    for t in times:
        v = Field(space, sum(c * t**j for j, c in enumerate(coef)))
        dv = Field(space, sum(j * c * t ** (j - 1) for j, c in enumerate(coef) if j > 0))
        sw = switch_field(residual_indicator(v, dv, None, beta, params), space.mesh, params)
        samples.append(NormSample(float(t), v, dv, sw))
    return samples, weights


def trajectory_samples(op: TransportOperator, config: TimeStepperConfig) -> list[NormSample]:
    space = op.space
    samples = []

    def obs(step, t, u, stepper):
        du, sw = state_derivative(op, u, t, stepper)
        samples.append(NormSample(t, Field(space, u.copy()), Field(space, du), sw))

    run(op, config, observer=obs)
    return samples


def admissible_c_theta(samples, phi, beta, params, theta, time_weights=None) -> float:
    """Largest left-side coefficient for which the inequality holds with ``C = 0``."""
    d0 = stability_diagnostic(samples, phi, beta, params.sigma0, params.sigma1, theta, c_theta=0.0, time_weights=time_weights)
    d1 = stability_diagnostic(samples, phi, beta, params.sigma0, params.sigma1, theta, c_theta=1.0, time_weights=time_weights)
    slack = d0.rhs_no_c[-1] - d0.lhs_no_c[-1]
    trip = d1.lhs_no_c[-1] - d0.lhs_no_c[-1]
    return float(slack / trip) if trip > 0 else float("inf")


def run_stability_diag(cfg: ExperimentConfig, out: Path) -> Report:
    sc = cfg.stability
    problem = build_problem(cfg)
    beta = cfg.problem.beta
    rng = np.random.default_rng(cfg.seed)
    rep = Report("stability-diag")
    sizes = list(cfg.mesh.sizes)

    studies = ratio_studies(sizes=sizes, k=cfg.k, n_samples=max(sc.calibration_samples, 10), beta=tuple(beta), params=stab_params(cfg, problem), seed=cfg.seed)
    for st in studies.values():
        rep.add(f"ratio {st.name}: max {', '.join(f'{r:.3g}' for r in st.max_ratio)} stable within 50%", st.stable(0.5), max_ratio=st.max_ratio)

    # calibration of C on random trajectories, per mesh
    T = sc.run_t_final
    calibrated, c_adm = [], []
    spaces = {n: build_mesh_space(cfg, n) for n in sizes}
    for n in sizes:
        space = spaces[n]
        params = stab_params(cfg, problem)
        phi = weight_for(cfg, space)
        req, adm = [], []
        for _ in range(sc.calibration_samples):
            s, w = random_polynomial_trajectory(space, rng, params, beta, T, sc.time_degree, sc.time_points)
            d = stability_diagnostic(s, phi, beta, params.sigma0, params.sigma1, sc.theta, sc.c_theta, time_weights=w)
            req.append(d.required_constant)
            adm.append(admissible_c_theta(s, phi, beta, params, sc.theta, w))
        calibrated.append(sc.constant_safety * max(0.0, max(req)))
        c_adm.append(min(adm))
    C = max(calibrated)
    rep.data.update(calibrated_C=calibrated, admissible_c_theta=c_adm)
    spread = max(abs(c - c_adm[0]) / c_adm[0] for c in c_adm)
    rep.add(f"admissible c_theta per mesh {', '.join(f'{c:.3g}' for c in c_adm)} stable within 50%", spread <= 0.5, spread=spread)
    rep.add(f"calibrated C per mesh {', '.join(f'{c:.3g}' for c in calibrated)}", True, asserted=False)

    # held-out random trajectories on the finest mesh
    space = spaces[sizes[-1]]
    params = stab_params(cfg, problem)
    phi = weight_for(cfg, space)
    worst = np.inf
    for _ in range(sc.heldout_samples):
        s, w = random_polynomial_trajectory(space, rng, params, beta, T, sc.time_degree, sc.time_points)
        d = stability_diagnostic(s, phi, beta, params.sigma0, params.sigma1, sc.theta, sc.c_theta, time_weights=w)
        worst = min(worst, float(d.margin(C)[-1]))
    rep.add(f"held-out random trajectories: min margin {worst:.3g} >= 0", worst >= 0.0, min_margin=worst)

    # smooth runs
    margin_rows = []
    for n in sizes:
        space = spaces[n]
        op = TransportOperator(space, problem.spec, params)
        samples = trajectory_samples(op, stepper_config(cfg, t_end=T, snapshots=[]))
        phi = weight_for(cfg, space)
        d = stability_diagnostic(samples, phi, beta, params.sigma0, params.sigma1, sc.theta, sc.c_theta)
        m = d.margin(C)
        for t, mi, lhs, rhs in zip(d.times, m, d.lhs_no_c, d.rhs_no_c + C * d.decay_integral):
            margin_rows.append({"n": n, "t": float(t), "lhs": float(lhs), "rhs": float(rhs), "margin": float(mi)})
        rep.add(f"smooth run n={n}: margin min {m.min():.3g} >= 0 (theta={sc.theta:g})", m.min() >= 0.0, min_margin=float(m.min()))
    if sc.shock_run_size:
        n = sc.shock_run_size
        scfg = replace(
            cfg,
            mesh=replace(cfg.mesh, sizes=[n], periodic=[False, False]),
            problem=replace(cfg.problem, initial="step", bc="inflow", beta=[1.0, 0.0]),
        )
        sproblem = build_problem(scfg)
        space = build_mesh_space(scfg, n)
        sparams = stab_params(scfg, sproblem)
        op = TransportOperator(space, sproblem.spec, sparams)
        samples = trajectory_samples(op, stepper_config(scfg, t_end=T, snapshots=[]))
        phi = replace(weight_for(scfg, space), period=None)
        d = stability_diagnostic(samples, phi, [1.0, 0.0], sparams.sigma0, sparams.sigma1, sc.theta, sc.c_theta)
        m = d.margin(C)
        for t, mi, lhs, rhs in zip(d.times, m, d.lhs_no_c, d.rhs_no_c + C * d.decay_integral):
            margin_rows.append({"n": f"shock{n}", "t": float(t), "lhs": float(lhs), "rhs": float(rhs), "margin": float(mi)})
        rep.add(f"shock run n={n}: margin min {m.min():.3g}", m.min() >= 0.0, asserted=False, min_margin=float(m.min()))
    write_csv(out / "stability_margin.csv", margin_rows)
    return rep


# }}}

RUNNERS = {
    "solve": run_solve,
    "convergence": run_convergence,
    "shock": run_shock,
    "localisation": run_localisation,
    "stability-diag": run_stability_diag,
}


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> Report:
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config_resolved.json")
    rep = RUNNERS[cfg.experiment](cfg, out)
    rep.write(out)
    return rep
