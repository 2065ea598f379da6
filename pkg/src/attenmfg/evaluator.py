"""Schedules, feasibility checks and the two independent cost paths.

A schedule is a decoding sequence of length ``T * J``: entry ``k`` is the row
picked at step ``k`` (a real machine ``0..M-1`` or the idle row ``M``), and
step ``k`` belongs to period ``k // J``.  The maintenance crew starts at the
depot (site 0), moves to the site of every picked row, and goes back to the
depot whenever the idle row is picked.  Each change of crew site costs the
travel cost once.

``sequence_cost`` prices a schedule from the feature tensors; ``direct_mip_cost``
prices it from the instance through the scheduling variables (production
levels, unmet demand, corrective/preventive split).  Both must agree.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from attenmfg.core_model import EconomicParams, Instance
from attenmfg.embedding import DEPOT, FeatureTensor
from attenmfg.errors import InfeasibleScheduleError


@dataclass(frozen=True)
class Schedule:
    seq: tuple[int, ...]
    n_real: int
    horizon: int
    dup: int

    @classmethod
    def from_seq(cls, seq: Iterable[int], n_real: int, horizon: int, dup: int) -> "Schedule":
        return cls(tuple(int(v) for v in seq), n_real, horizon, dup)

    @property
    def idle_row(self) -> int:
        return self.n_real

    def z(self) -> np.ndarray:
        """0/1 matrix ``z[m, p]``: machine ``m`` maintained in (0-based) period ``p``."""
        z = np.zeros((self.n_real, self.horizon), dtype=np.int64)
        for k, row in enumerate(self.seq):
            if 0 <= row < self.n_real:
                z[row, k // self.dup] += 1
        return z

    def crew_sites(self, row_sites: Sequence[int]) -> np.ndarray:
        """Crew site after each step; ``row_sites`` includes the idle row (depot)."""
        return np.array([row_sites[r] for r in self.seq], dtype=np.int64)

    def period_sites(self, row_sites: Sequence[int]) -> list[set[int]]:
        """Sites the crew occupies during each period (the phi variables)."""
        crew = self.crew_sites(row_sites)
        return [set(crew[p * self.dup:(p + 1) * self.dup].tolist()) for p in range(self.horizon)]

    def relocations(self, row_sites: Sequence[int]) -> np.ndarray:
        """Per-step flag: crew site differs from the previous step (depot before step 0)."""
        crew = self.crew_sites(row_sites)
        prev = np.concatenate([[DEPOT], crew[:-1]])
        return (crew != prev).astype(np.int64)


@dataclass(frozen=True)
class Violation:
    constraint: str
    index: int | None
    message: str


@dataclass(frozen=True)
class CostBreakdown:
    """Objective split into its five terms.

    The sequence path only sees ``chi``, which already merges preventive,
    corrective and idle costs; it reports that sum under ``maint_pre`` and
    leaves ``maint_corr``/``idle_pen`` at zero.
    """

    maint_pre: float
    maint_corr: float
    idle_pen: float
    demand_pen: float
    travel: float

    @property
    def maintenance(self) -> float:
        return self.maint_pre + self.maint_corr + self.idle_pen

    @property
    def total(self) -> float:
        return self.maint_pre + self.maint_corr + self.idle_pen + self.demand_pen + self.travel


def _row_sites(instance: Instance) -> list[int]:
    return [*instance.sites.tolist(), DEPOT]


def check_feasible(schedule: Schedule, instance: Instance) -> list[Violation]:
    """Return every violated constraint; an empty list means feasible."""
    M, T, J = instance.n_machines, instance.horizon, instance.J
    if len(schedule.seq) != T * J:
        raise ValueError(f"schedule length {len(schedule.seq)} != T*J = {T * J}")
    out: list[Violation] = []
    bad = [k for k, r in enumerate(schedule.seq) if not 0 <= r <= M]
    for k in bad:
        out.append(Violation("domain", k, f"step {k}: row {schedule.seq[k]} outside [0, {M}]"))
    if bad:
        return out
    z = schedule.z()
    for p, n in enumerate(z.sum(axis=0)):
        if n > J:
            out.append(Violation("max_per_period", p, f"period {p + 1}: {n} > J={J} maintenance actions"))
    for m, n in enumerate(z.sum(axis=1)):
        if n != 1:
            out.append(Violation("exactly_once", m, f"machine {m} maintained {n} times"))
    # team presence: a machine at site l maintained in period t needs the crew at l during t
    row_sites = _row_sites(instance)
    phi = schedule.period_sites(row_sites)
    for m, p in zip(*np.nonzero(z)):
        if row_sites[m] not in phi[p]:
            out.append(Violation("team_presence", int(m), f"machine {m} at site {row_sites[m]} "
                                                          f"maintained in period {p + 1} without crew"))
    return out


def _require_feasible(schedule: Schedule, instance: Instance | None, n_real: int, n_steps: int) -> None:
    if instance is not None:
        v = check_feasible(schedule, instance)
        if v:
            raise InfeasibleScheduleError("; ".join(x.message for x in v))
        return
    seq = schedule.seq
    if len(seq) != n_steps:
        raise InfeasibleScheduleError(f"schedule length {len(seq)} != {n_steps}")
    real = [r for r in seq if r != n_real]
    if any(not 0 <= r < n_real for r in real) or sorted(real) != list(range(n_real)):
        raise InfeasibleScheduleError("every machine must be maintained exactly once")


def sequence_cost(schedule: Schedule, features: FeatureTensor, economics: EconomicParams) -> CostBreakdown:
    """Per-step ``chi + Y`` plus the travel cost for every crew relocation."""
    _require_feasible(schedule, None, features.n_real, features.n_steps)
    steps = np.arange(features.n_steps)
    rows = np.asarray(schedule.seq)
    chi = float(features.chi[rows, steps].sum())
    yy = float(features.y[rows, steps].sum())
    moves = int(schedule.relocations(features.site.tolist()).sum())
    return CostBreakdown(chi, 0.0, 0.0, yy, moves * economics.travel_cost)


def sequence_total(seq: Sequence[int], cost: np.ndarray, site: np.ndarray, travel_cost: float) -> float:
    """Canonical cost of a raw sequence without feasibility checks (hot path)."""
    total = 0.0
    crew = DEPOT
    for k, r in enumerate(seq):
        total += cost[r, k]
        s = site[r]
        if s != crew:
            total += travel_cost
            crew = s
    return total


def direct_mip_cost(schedule: Schedule, instance: Instance) -> CostBreakdown:
    """Objective of the scheduling program evaluated on the schedule's ``z``.

    Production levels are set to their upper bounds (which is optimal for the
    fixed ``z``): before failure a machine produces at capacity except in the
    period it is maintained; from the failure on it produces only once it has
    been maintained in an earlier period.
    """
    _require_feasible(schedule, instance, instance.n_machines, instance.horizon * instance.J)
    econ = instance.economics
    S, T = instance.scenarios.n_scenarios, instance.horizon
    z = schedule.z().astype(float)  # (M, T)
    F = instance.scenarios.failure_time  # (S, M)
    t = np.arange(1, T + 1)
    before = t[None, None, :] <= F[:, :, None] - 1  # (S, M, T)
    cf = np.array([m.corrective_cost for m in instance.machines])

    zs = z[None, :, :]
    pre = float((instance.dmc[None] * zs * before).sum()) / S
    corr = float((cf[None, :, None] * zs * ~before).sum()) / S
    downtime = np.where(before, 1.0, t[None, None, :] - F[:, :, None] + 1.0)
    idle = float((econ.idle_penalty * downtime * zs).sum()) / S

    P = instance.scenarios.production_limit
    done_earlier = np.cumsum(z, axis=1) - z  # sum_{l < t} z[m, l]
    lam = np.where(before, P * (1.0 - zs), P * done_earlier[None])
    gamma = np.maximum(instance.demand[None] - lam, 0.0)
    unmet = gamma.mean(axis=0)
    demand = float(econ.demand_penalty * unmet.sum())

    moves = int(schedule.relocations(_row_sites(instance)).sum())
    return CostBreakdown(pre, corr, idle, demand, moves * econ.travel_cost)


def gap(oracle_cost: float, policy_cost: float) -> float:
    """Optimality gap in percent."""
    if not oracle_cost > 0:
        raise ValueError(f"oracle cost must be positive, got {oracle_cost}")
    return 100.0 * (policy_cost - oracle_cost) / oracle_cost


# ---------------------------------------------------------------------------
# gap reports


@dataclass
class GapReport:
    instance_id: str
    oracle_cost: float | None
    policy_cost: float
    gap_pct: float | None
    decode_ms: float
    oracle_ms: float | None
    proven: bool = True


GAP_HEADER = ("instance_id", "oracle_cost", "policy_cost", "gap_pct", "decode_ms", "oracle_ms")


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_gap_csv(rows: Iterable[GapReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GAP_HEADER)
    for r in rows:
        w.writerow([_cell(getattr(r, f)) for f in GAP_HEADER])
    return buf.getvalue()


def read_gap_csv(text: str) -> list[GapReport]:
    def num(s: str) -> float | None:
        return None if s in ("NA", "") else float(s)

    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        g = num(rec["gap_pct"])
        out.append(GapReport(rec["instance_id"], num(rec["oracle_cost"]), float(rec["policy_cost"]),
                             g, float(rec["decode_ms"]), num(rec["oracle_ms"]), proven=g is not None))
    return out


def summarize_gaps(rows: Sequence[GapReport]) -> dict[str, float | int | None]:
    """Mean, median, Q1 and Q3 of the gap over rows with a proven oracle."""
    gaps = np.array([r.gap_pct for r in rows if r.gap_pct is not None], dtype=float)
    if gaps.size == 0:
        return {"n": len(rows), "n_proven": 0, "mean": None, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(gaps, [25, 50, 75])
    return {"n": len(rows), "n_proven": int(gaps.size), "mean": float(gaps.mean()),
            "median": float(med), "q1": float(q1), "q3": float(q3)}

