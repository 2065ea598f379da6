"""Problem instances for multi-site leased-machine maintenance scheduling.

An :class:`Instance` bundles the sites, machines, planning horizon, failure
scenarios, demand and economic parameters.  Periods are 1-based in the
mathematical description; every array in this module is 0-based, so column
``p`` of a ``(M, T)`` matrix holds period ``t = p + 1``.  Failure times keep
the 1-based convention, with ``T + 1`` meaning "no failure inside the
horizon".
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from attenmfg.errors import (
    InfeasibleConfigError,
    InstanceParseError,
    InstanceValidationError,
    InvalidParametersError,
)

SCHEMA = "attenmfg-instance/1"
MAX_SITES = 10


class Survival(Protocol):
    """Anything that can act as the remaining-life distribution of a machine."""

    scale: float
    observe_time: float

    def sf(self, z: np.ndarray) -> np.ndarray: ...

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray: ...


@dataclass(frozen=True)
class SurvivalParams:
    """Two-parameter Weibull remaining life, ``P(R > z) = exp(-(z/scale)**shape)``."""

    shape: float
    scale: float
    observe_time: float = 0.0

    def __post_init__(self) -> None:
        if not (self.shape > 0 and self.scale > 0 and self.observe_time >= 0):
            raise InvalidParametersError(
                f"bad Weibull parameters shape={self.shape} scale={self.scale} "
                f"observe_time={self.observe_time}"
            )

    def sf(self, z):
        z = np.asarray(z, dtype=float)
        return np.exp(-np.power(np.maximum(z, 0.0) / self.scale, self.shape))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.scale * rng.weibull(self.shape, size)

    def mean_life(self) -> float:
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)


@dataclass(frozen=True)
class DeterministicLife:
    """Remaining life known exactly (step survival function).

    The survival value at the jump itself is 1/2, so that the trapezoid rule
    integrates the step exactly when a grid node lands on ``life``.
    """

    life: float
    observe_time: float = 0.0

    @property
    def scale(self) -> float:
        return self.life

    def sf(self, z):
        z = np.asarray(z, dtype=float)
        out = np.where(z < self.life, 1.0, 0.0)
        return np.where(np.isclose(z, self.life, rtol=1e-12, atol=0.0), 0.5, out)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, float(self.life))


@dataclass(frozen=True)
class EconomicParams:
    idle_penalty: float
    demand_penalty: float
    travel_cost: float
    max_maint_per_period: int

    def __post_init__(self) -> None:
        if min(self.idle_penalty, self.demand_penalty, self.travel_cost) < 0:
            raise InstanceValidationError("economic costs must be non-negative")
        if self.max_maint_per_period < 1:
            raise InstanceValidationError("J must be at least 1")


@dataclass(frozen=True)
class MachineSpec:
    machine_id: int
    site_id: int
    preventive_cost: float
    corrective_cost: float
    survival: SurvivalParams
    nominal_rate: float


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.flags.writeable = False


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    failure_time: np.ndarray  # (S, M) int, values in [1, T+1]
    production_limit: np.ndarray  # (S, M, T)

    def __post_init__(self) -> None:
        _freeze(self.failure_time, self.production_limit)

    @property
    def n_scenarios(self) -> int:
        return self.failure_time.shape[0]


@dataclass(frozen=True, eq=False)
class Instance:
    n_sites: int
    horizon: int
    economics: EconomicParams
    machines: tuple[MachineSpec, ...]
    scenarios: ScenarioSet
    demand: np.ndarray  # (M, T)
    dmc: np.ndarray  # (M, T)
    seed: int | None = None

    def __post_init__(self) -> None:
        _freeze(self.demand, self.dmc)

    @property
    def n_machines(self) -> int:
        return len(self.machines)

    @property
    def J(self) -> int:
        return self.economics.max_maint_per_period

    @property
    def sites(self) -> np.ndarray:
        return np.array([m.site_id for m in self.machines], dtype=np.int64)

    def validate(self) -> None:
        M, T, J = self.n_machines, self.horizon, self.J
        if T < 1:
            raise InstanceValidationError("horizon must be positive")
        if M > T * J:
            raise InfeasibleConfigError(f"M={M} machines exceed T*J={T * J} maintenance slots")
        if not 1 <= self.n_sites <= MAX_SITES:
            raise InstanceValidationError(f"n_sites={self.n_sites} outside [1, {MAX_SITES}]")
        for i, m in enumerate(self.machines):
            if m.machine_id != i:
                raise InstanceValidationError(f"machine ids must be 0..M-1, got {m.machine_id} at {i}")
            if not 1 <= m.site_id <= self.n_sites:
                raise InstanceValidationError(
                    f"machine {i}: site {m.site_id} outside [1, {self.n_sites}] (0 is the depot)"
                )
            if not m.nominal_rate > 0:
                raise InstanceValidationError(f"machine {i}: nominal_rate must be positive")
            if m.preventive_cost < 0 or m.corrective_cost < 0:
                raise InstanceValidationError(f"machine {i}: costs must be non-negative")
        sc = self.scenarios
        if sc.n_scenarios < 1:
            raise InstanceValidationError("at least one scenario is required")
        if sc.failure_time.shape != (sc.n_scenarios, M):
            raise InstanceValidationError(f"failure shape {sc.failure_time.shape} != (S, {M})")
        if sc.production_limit.shape != (sc.n_scenarios, M, T):
            raise InstanceValidationError("production limit shape mismatch")
        if np.any(sc.failure_time < 1) or np.any(sc.failure_time > T + 1):
            raise InstanceValidationError("failure times must lie in [1, T+1]")
        if np.any(sc.production_limit < 0):
            raise InstanceValidationError("production limits must be non-negative")
        for name in ("demand", "dmc"):
            arr = getattr(self, name)
            if arr.shape != (M, T):
                raise InstanceValidationError(f"{name} shape {arr.shape} != ({M}, {T})")
            if not np.all(np.isfinite(arr)):
                raise InstanceValidationError(f"{name} has non-finite entries")
        if np.any(self.demand < 0):
            raise InstanceValidationError("demand must be non-negative")


# ---------------------------------------------------------------------------
# dynamic maintenance cost


def compute_dynamic_cost(survival: Survival, preventive_cost: float, corrective_cost: float,
                         t, horizon_cap: float | None = None):
    """Sensor-driven preventive maintenance cost at period(s) ``t``.

    ``[Cp * P(R > t) + Cf * P(R <= t)] / (integral_0^inf P(R > z) dz + t_obs)``

    The integral is a composite trapezoid with step ``scale / 1000`` on
    ``[0, horizon_cap]``; ``horizon_cap`` defaults to ``10 * scale``.
    Accepts a scalar or array ``t`` and returns the same shape.
    """
    scale = float(survival.scale)
    if horizon_cap is None:
        horizon_cap = 10.0 * scale
    if not horizon_cap >= 10.0 * scale * (1 - 1e-12):
        raise InvalidParametersError("horizon_cap must be at least 10 * scale")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 1):
        raise InvalidParametersError("period t must be >= 1")
    n_steps = int(round(horizon_cap / (scale / 1000.0)))
    grid = np.linspace(0.0, horizon_cap, n_steps + 1)
    vals = survival.sf(grid)
    mrl = np.trapezoid(vals, grid)
    surv_t = survival.sf(t_arr)
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(surv_t)) and np.isfinite(mrl)):
        raise InvalidParametersError("survival function evaluated to a non-finite value")
    denom = mrl + survival.observe_time
    if not denom > 0:
        raise InvalidParametersError("mean residual life plus observation time must be positive")
    num = preventive_cost * surv_t + corrective_cost * (1.0 - surv_t)
    out = num / denom
    return float(out) if out.ndim == 0 else out


def dmc_matrix(machines, horizon: int) -> np.ndarray:
    periods = np.arange(1, horizon + 1, dtype=float)
    return np.stack([
        compute_dynamic_cost(m.survival, m.preventive_cost, m.corrective_cost, periods)
        for m in machines
    ]) if machines else np.zeros((0, horizon))


# ---------------------------------------------------------------------------
# random draws


def sample_scenarios(machines, horizon: int, n_scenarios: int,
                     rng: np.random.Generator) -> ScenarioSet:
    """Failure times from each machine's life distribution, ceil'd and clamped to T+1."""
    if n_scenarios < 1:
        raise InvalidParametersError("n_scenarios must be >= 1")
    M = len(machines)
    failure = np.empty((n_scenarios, M), dtype=np.int64)
    for i, m in enumerate(machines):
        life = m.survival.sample(rng, n_scenarios)
        failure[:, i] = np.clip(np.ceil(life), 1, horizon + 1).astype(np.int64)
    rates = np.array([m.nominal_rate for m in machines], dtype=float)
    limit = np.broadcast_to(rates[None, :, None], (n_scenarios, M, horizon)).copy()
    return ScenarioSet(failure_time=failure, production_limit=limit)


def sample_demand(machines, horizon: int, rng: np.random.Generator,
                  sigma_frac: float = 0.1) -> np.ndarray:
    rates = np.array([m.nominal_rate for m in machines], dtype=float)
    if np.any(rates <= 0):
        raise InvalidParametersError("nominal_rate must be positive")
    draws = rng.normal(rates[:, None], sigma_frac * rates[:, None], size=(len(machines), horizon))
    return np.maximum(draws, 0.0)


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Instance-family description.

    ``family="type1"`` uses ``n_sites`` for every instance; ``"type2"`` draws
    the site count uniformly from 1..10 per instance.  The cost and lifetime
    ranges are uniform-draw bounds; lifetimes scale with the horizon so that a
    sizeable share of machines fail inside it.
    """

    n_machines: int
    horizon: int
    J: int = 3
    n_sites: int | None = 5
    family: str = "type1"
    n_scenarios: int = 5
    seed: int = 0
    preventive_cost: tuple[float, float] = (100.0, 200.0)
    corrective_ratio: tuple[float, float] = (2.0, 4.0)
    weibull_shape: tuple[float, float] = (1.5, 3.0)
    weibull_scale_frac: tuple[float, float] = (0.5, 1.5)
    observe_time: tuple[float, float] = (0.0, 0.0)
    nominal_rate: tuple[float, float] = (5.0, 15.0)
    demand_sigma_frac: float = 0.1
    idle_penalty: float = 10.0
    demand_penalty: float = 2.0
    travel_cost: float = 30.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.family not in ("type1", "type2"):
            raise InvalidParametersError(f"unknown family {self.family!r}")
        if self.family == "type1" and not (self.n_sites and 1 <= self.n_sites <= MAX_SITES):
            raise InvalidParametersError("type1 needs n_sites in [1, 10]")
        if self.n_machines < 0 or self.horizon < 1 or self.J < 1 or self.n_scenarios < 1:
            raise InvalidParametersError("sizes must be positive")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        sites = "R" if self.family == "type2" else str(self.n_sites)
        return f"L{sites}P{self.horizon}M{self.n_machines}"

    def with_seed(self, seed: int) -> "GeneratorConfig":
        from dataclasses import replace
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict[str, Any]:
        from dataclasses import asdict
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GeneratorConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


_NAME_RE = re.compile(r"^(?:D_)?L(\d+|R)P(\d+)M(\d+)(?:_J(\d+))?(?:_S(\d+))?$")


def config_from_name(name: str, **overrides) -> GeneratorConfig:
    """Parse the ``LxPxMx`` naming convention (``LR`` = random site count).

    Desk presets carry a ``D_`` prefix and an explicit ``_J`` suffix, e.g.
    ``D_L2P4M6_J2``; without a suffix J defaults to 3.  Desk presets default
    to five scenarios.
    """
    m = _NAME_RE.match(name)
    if not m:
        raise InvalidParametersError(f"cannot parse configuration name {name!r}")
    sites, horizon, machines, J, S = m.groups()
    kw: dict[str, Any] = dict(
        n_machines=int(machines),
        horizon=int(horizon),
        J=int(J) if J else 3,
        name=name,
        n_scenarios=int(S) if S else (5 if name.startswith("D_") else 10),
    )
    if sites == "R":
        kw.update(family="type2", n_sites=None)
    else:
        kw.update(family="type1", n_sites=int(sites))
    kw.update(overrides)
    return GeneratorConfig(**kw)


TABLE1_PRESETS = ("L5P10M25", "L5P15M40", "L5P20M50", "L10P10M25", "L10P15M40",
                  "L10P20M50", "LRP15M40", "LRP20M50")
DESK_PRESETS = ("D_L2P4M6_J2", "D_L3P4M6_J2", "D_L3P5M8_J2")


def _uniform(rng: np.random.Generator, bounds: tuple[float, float], size: int) -> np.ndarray:
    lo, hi = bounds
    if hi > lo:
        return rng.uniform(lo, hi, size)
    return np.full(size, float(lo))


def generate_instance(cfg: GeneratorConfig) -> Instance:
    """Draw one instance; identical configs (including seed) give identical instances."""
    M, T, J = cfg.n_machines, cfg.horizon, cfg.J
    if M > T * J:
        raise InfeasibleConfigError(f"M={M} machines exceed T*J={T * J} maintenance slots")
    rng = np.random.default_rng(cfg.seed)
    L = int(rng.integers(1, MAX_SITES + 1)) if cfg.family == "type2" else int(cfg.n_sites)
    site_ids = rng.integers(1, L + 1, size=M)
    cp = _uniform(rng, cfg.preventive_cost, M)
    cf = cp * _uniform(rng, cfg.corrective_ratio, M)
    shape = _uniform(rng, cfg.weibull_shape, M)
    scale = T * _uniform(rng, cfg.weibull_scale_frac, M)
    t_obs = _uniform(rng, cfg.observe_time, M)
    rate = _uniform(rng, cfg.nominal_rate, M)
    machines = tuple(
        MachineSpec(
            machine_id=i,
            site_id=int(site_ids[i]),
            preventive_cost=float(cp[i]),
            corrective_cost=float(cf[i]),
            survival=SurvivalParams(float(shape[i]), float(scale[i]), float(t_obs[i])),
            nominal_rate=float(rate[i]),
        )
        for i in range(M)
    )
    scenarios = sample_scenarios(machines, T, cfg.n_scenarios, rng)
    demand = sample_demand(machines, T, rng, cfg.demand_sigma_frac)
    econ = EconomicParams(cfg.idle_penalty, cfg.demand_penalty, cfg.travel_cost, J)
    inst = Instance(
        n_sites=L,
        horizon=T,
        economics=econ,
        machines=machines,
        scenarios=scenarios,
        demand=demand,
        dmc=dmc_matrix(machines, T),
        seed=int(cfg.seed),
    )
    inst.validate()
    return inst


# ---------------------------------------------------------------------------
# serialization


def _fmt(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(f'"{k}":{_fmt(v)}' for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise InstanceValidationError("cannot serialize non-finite float")
        s = format(x, ".17g")
        if "e" not in s and "." not in s:
            s += ".0"
        return s
    if isinstance(obj, str):
        import json
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def instance_to_dict(inst: Instance) -> dict[str, Any]:
    e = inst.economics
    return {
        "schema": SCHEMA,
        "n_sites": inst.n_sites,
        "horizon": inst.horizon,
        "J": e.max_maint_per_period,
        "economics": {
            "idle_penalty": float(e.idle_penalty),
            "demand_penalty": float(e.demand_penalty),
            "travel_cost": float(e.travel_cost),
        },
        "machines": [
            {
                "id": m.machine_id,
                "site": m.site_id,
                "cp": float(m.preventive_cost),
                "cf": float(m.corrective_cost),
                "weibull": {
                    "k": float(m.survival.shape),
                    "lambda": float(m.survival.scale),
                    "t_obs": float(m.survival.observe_time),
                },
                "rate": float(m.nominal_rate),
            }
            for m in inst.machines
        ],
        "scenarios": {
            "failure": inst.scenarios.failure_time.astype(int).tolist(),
            "limit": inst.scenarios.production_limit.astype(float).tolist(),
        },
        "demand": inst.demand.astype(float).tolist(),
        "dmc": inst.dmc.astype(float).tolist(),
        "seed": inst.seed,
    }


def save_instance(inst: Instance) -> bytes:
    """Serialize to the versioned JSON schema (floats at 17 significant digits)."""
    return (_fmt(instance_to_dict(inst)) + "\n").encode()


def _get(d: dict, key: str, path: str = ""):
    name = f"{path}.{key}" if path else key
    if not isinstance(d, dict) or key not in d:
        raise InstanceParseError(name)
    return d[key]


def _num_array(value, name: str, ndim: int, dtype=float) -> np.ndarray:
    try:
        arr = np.array(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise InstanceParseError(name, f"field {name!r} is not a numeric array: {exc}") from exc
    if arr.ndim != ndim and arr.size:
        raise InstanceParseError(name, f"field {name!r} must be {ndim}-dimensional")
    return arr


def instance_from_dict(d: dict[str, Any]) -> Instance:
    if d.get("schema") != SCHEMA:
        raise InstanceParseError("schema", f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
    n_sites = int(_get(d, "n_sites"))
    T = int(_get(d, "horizon"))
    J = int(_get(d, "J"))
    ed = _get(d, "economics")
    econ = EconomicParams(
        float(_get(ed, "idle_penalty", "economics")),
        float(_get(ed, "demand_penalty", "economics")),
        float(_get(ed, "travel_cost", "economics")),
        J,
    )
    machines = []
    for i, md in enumerate(_get(d, "machines")):
        path = f"machines[{i}]"
        w = _get(md, "weibull", path)
        try:
            surv = SurvivalParams(float(_get(w, "k", path + ".weibull")),
                                  float(_get(w, "lambda", path + ".weibull")),
                                  float(_get(w, "t_obs", path + ".weibull")))
        except InvalidParametersError as exc:
            raise InstanceValidationError(f"{path}: {exc}") from exc
        machines.append(MachineSpec(
            machine_id=int(_get(md, "id", path)),
            site_id=int(_get(md, "site", path)),
            preventive_cost=float(_get(md, "cp", path)),
            corrective_cost=float(_get(md, "cf", path)),
            survival=surv,
            nominal_rate=float(_get(md, "rate", path)),
        ))
    M = len(machines)
    sd = _get(d, "scenarios")
    failure = _num_array(_get(sd, "failure", "scenarios"), "scenarios.failure", 2, np.int64)
    limit = _num_array(_get(sd, "limit", "scenarios"), "scenarios.limit", 3)
    if failure.size == 0:
        failure = failure.reshape(len(_get(sd, "failure", "scenarios")), M)
    if limit.size == 0:
        limit = limit.reshape(failure.shape[0], M, T)
    demand = _num_array(_get(d, "demand"), "demand", 2).reshape(M, T)
    dmc = _num_array(_get(d, "dmc"), "dmc", 2).reshape(M, T)
    seed = d.get("seed")
    inst = Instance(
        n_sites=n_sites,
        horizon=T,
        economics=econ,
        machines=tuple(machines),
        scenarios=ScenarioSet(failure, limit),
        demand=demand,
        dmc=dmc,
        seed=None if seed is None else int(seed),
    )
    inst.validate()
    return inst


def load_instance(data: bytes | str) -> Instance:
    """Parse and validate an instance; the inverse of :func:`save_instance`."""
    import json
    try:
        d = json.loads(data)
    except json.JSONDecodeError as exc:
        raise InstanceParseError("<document>", f"not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise InstanceParseError("<document>", "top level must be an object")
    try:
        return instance_from_dict(d)
    except (InstanceParseError, InstanceValidationError, InfeasibleConfigError):
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise InstanceParseError("<document>", f"malformed instance: {exc}") from exc
