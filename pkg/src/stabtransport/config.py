"""Experiment configuration: a JSON file validated into dataclasses.

Every experiment has its own defaults; a config file only overrides what
it names.  Unknown keys are errors, reported with the line they sit on.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

EXPERIMENTS = ("solve", "convergence", "shock", "localisation", "stability-diag")


class ConfigError(ValueError):
    pass


@dataclass
class MeshConfig:
    """``sizes`` are cells per unit length; the cell counts follow from the domain."""

    sizes: list[int] = field(default_factory=lambda: [16])
    domain: list[float] = field(default_factory=lambda: [0.0, 1.0, 0.0, 1.0])
    periodic: list[bool] = field(default_factory=lambda: [True, True])

    def validate(self):
        if not self.sizes or any(int(n) < 1 for n in self.sizes):
            raise ConfigError("mesh.sizes must be a non-empty list of positive integers")
        if len(self.domain) != 4 or self.domain[1] <= self.domain[0] or self.domain[3] <= self.domain[2]:
            raise ConfigError("mesh.domain must be [x0, x1, y0, y1] with x1 > x0 and y1 > y0")
        if len(self.periodic) != 2:
            raise ConfigError("mesh.periodic needs one flag per axis")

    def cells(self, n: int) -> tuple[int, int]:
        x0, x1, y0, y1 = self.domain
        return max(1, round(n * (x1 - x0))), max(1, round(n * (y1 - y0)))


@dataclass
class ProblemConfig:
    beta: list[float] = field(default_factory=lambda: [1.0, 0.0])
    initial: str = "sine"  # sine | step | constant
    step_position: float = 1.0 / 3.0
    inflow_value: float = 1.0
    bc: str = "periodic"
    t_final: float = 0.5

    def validate(self):
        if self.initial not in ("sine", "step", "constant"):
            raise ConfigError(f"problem.initial must be sine, step or constant, got {self.initial!r}")
        if self.bc not in ("periodic", "inflow"):
            raise ConfigError(f"problem.bc must be periodic or inflow, got {self.bc!r}")
        if len(self.beta) != 2:
            raise ConfigError("problem.beta needs two components")
        if self.t_final < 0:
            raise ConfigError("problem.t_final must be >= 0")


@dataclass
class StabConfig:
    sigma0: float = 0.01
    sigma1: float = 0.01
    alpha: float = 4.0
    U: float | None = None  # None: 0.5 |beta| ||u0||_inf
    rho1: int = 0
    rho2: int = 1

    def validate(self):
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ConfigError("stabilisation.sigma0 and sigma1 must be >= 0")
        if self.alpha < 0:
            raise ConfigError(f"stabilisation.alpha must be >= 0, got {self.alpha}")
        if self.U is not None and not self.U > 0:
            raise ConfigError("stabilisation.U must be > 0")
        if self.rho1 not in (0, 1) or self.rho2 not in (0, 1):
            raise ConfigError("stabilisation.rho1 and rho2 must be 0 or 1")


@dataclass
class TimeConfig:
    cfl: float = 0.3
    dt_override: float | None = None
    snapshot_times: list[float] = field(default_factory=list)
    spectral_cap: bool = True

    def validate(self):
        if not 0 < self.cfl <= 1:
            raise ConfigError("time.cfl must lie in (0, 1]")
        if self.dt_override is not None and not self.dt_override > 0:
            raise ConfigError("time.dt_override must be > 0")


@dataclass
class WeightConfig:
    x0: list[float] = field(default_factory=lambda: [0.5, 0.5])
    r0: float = 0.15
    K: float = 1.5
    blend_width: float | None = None

    def validate(self):
        if not self.K > 1:
            raise ConfigError(f"weight.K must be > 1, got {self.K}")
        if self.r0 < 0:
            raise ConfigError("weight.r0 must be >= 0")


@dataclass
class ConvergenceConfig:
    degrees: list[int] = field(default_factory=lambda: [1, 2])
    min_rate: dict = field(default_factory=lambda: {"1": 1.4, "2": 2.4})
    full_diffusion_control: bool = False
    max_runtime: float = 300.0


@dataclass
class ShockConfig:
    probe_x: float = 0.2
    switch_time: float = 0.05
    far_cells: float = 10.0
    far_tolerance: float = 0.01
    compare_alpha: float = 1.0


@dataclass
class LocalisationConfig:
    alphas: list[float] = field(default_factory=lambda: [4.0, 1.0])
    asserted_alpha: float = 4.0
    halo_cells: float = 2.0
    refine: int = 4
    control_x0: list[float] | None = None  # weight centre for the negative control; None: on the shock
    control_r0: float = 0.1
    min_weighted_rate: float = 2.4
    max_global_rate: float = 1.0
    max_control_rate: float = 2.0


@dataclass
class StabilityConfig:
    theta: float = 0.1
    c_theta: float | None = None
    calibration_samples: int = 20
    heldout_samples: int = 50
    time_degree: int = 3
    time_points: int = 6
    constant_safety: float = 1.5
    run_t_final: float = 0.25
    shock_run_size: int | None = None  # also report (not assert) the margin on a shock run of this size

    def validate(self):
        if self.theta < 0:
            raise ConfigError("stability.theta must be >= 0")


@dataclass
class ExperimentConfig:
    experiment: str
    output_dir: str = "output"
    seed: int = 0
    k: int = 2
    mesh: MeshConfig = field(default_factory=MeshConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    stabilisation: StabConfig = field(default_factory=StabConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    weight: WeightConfig = field(default_factory=WeightConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    shock: ShockConfig = field(default_factory=ShockConfig)
    localisation: LocalisationConfig = field(default_factory=LocalisationConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if self.k not in (1, 2, 3):
            raise ConfigError(f"k must be 1, 2 or 3, got {self.k}")
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if hasattr(sub, "validate"):
                sub.validate()
        if self.problem.bc == "periodic" and not all(self.mesh.periodic):
            raise ConfigError("problem.bc periodic needs mesh.periodic [true, true]")
        if self.experiment in ("convergence", "localisation") and len(self.mesh.sizes) < 3:
            raise ConfigError("rate experiments need at least 3 mesh sizes")
        if self.experiment in ("convergence", "localisation") and sorted(set(self.mesh.sizes)) != list(self.mesh.sizes):
            raise ConfigError("mesh.sizes must be strictly increasing")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# per-experiment defaults layered over the dataclass defaults
DEFAULTS: dict[str, dict] = {
    "solve": {},
    "convergence": {
        "mesh": {"sizes": [8, 16, 32, 64]},
    },
    "shock": {
        "k": 2,
        "mesh": {"sizes": [48], "periodic": [False, False]},
        "problem": {"initial": "step", "bc": "inflow", "t_final": 0.375},
        "time": {"snapshot_times": [0.05, 0.375]},
    },
    "localisation": {
        "k": 2,
        "mesh": {"sizes": [16, 32, 64], "domain": [0.0, 4.0, 0.0, 0.25], "periodic": [False, False]},
        "problem": {"initial": "step", "step_position": 3.0, "bc": "inflow", "t_final": 0.25},
        "weight": {"x0": [0.0, 0.125], "r0": 0.3, "K": 1.05},
    },
    "stability-diag": {
        "k": 2,
        "mesh": {"sizes": [8, 16]},
        "weight": {"x0": [0.5, 0.5], "r0": 0.15, "K": 1.5},
    },
}


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    if m is None:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _build(cls, data: dict, path: str, text: str | None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {where!r}{_line_of(text, key)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}.{key}" if path else key, text)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not k.endswith("min_rate"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: dict, text: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict) or "experiment" not in data:
        raise ConfigError("config needs an 'experiment' key")
    exp = data["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {exp!r}{_line_of(text, 'experiment')}")
    merged = _merge(DEFAULTS[exp], data)
    cfg = _build(ExperimentConfig, merged, "", text)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(".", 1)[-1].split(" ", 1)[0]
        raise ConfigError(f"{exc}{_line_of(text, key)}") from None
    return cfg


def parse_config(path, experiment: str | None = None) -> ExperimentConfig:
    """Read and validate a JSON config; ``experiment`` fills in a missing ``experiment`` key."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if experiment is not None and isinstance(data, dict):
        data.setdefault("experiment", experiment)
    return config_from_dict(data, text)


def write_resolved(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def as_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj
