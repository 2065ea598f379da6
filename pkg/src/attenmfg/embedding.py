"""Feature tensors fed to the policy and shared by every cost path.

For each machine ``m`` and candidate maintenance period ``t`` two costs are
precomputed: ``x[m, t]`` (maintenance plus idle penalty, scenario averaged)
and ``y[m, t]`` (expected unmet-demand penalty when maintaining at ``t``).
Appending one zero-cost idle row stationed at the depot and repeating every
period column ``J`` times gives the ``(M + 1) x (T * J)`` tensors the decoder
walks through, one column per decision step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from attenmfg.core_model import Instance

DEPOT = 0


@dataclass(frozen=True, eq=False)
class ThroughputCube:
    """Production ``lam[s, m, t, l]`` in period ``l`` when ``m`` is maintained at ``t``."""

    lam: np.ndarray


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    chi: np.ndarray  # (R, C) maintenance cost, R = M + 1, C = T * J
    y: np.ndarray  # (R, C) unmet-demand penalty
    site: np.ndarray  # (R,) site id, depot row last with site 0
    n_real: int
    n_idle: int
    horizon: int
    dup: int
    time_frac: np.ndarray  # (C,) period / T
    slot_frac: np.ndarray  # (C,) slot-within-period / J

    @property
    def n_rows(self) -> int:
        return self.n_real + self.n_idle

    @property
    def n_steps(self) -> int:
        return self.horizon * self.dup

    @property
    def idle_row(self) -> int:
        return self.n_real

    @property
    def cost(self) -> np.ndarray:
        return self.chi + self.y

    def period_of(self, step: int) -> int:
        """0-based period for a 0-based decoding step."""
        return step // self.dup


def build_maintenance_cost(instance: Instance) -> np.ndarray:
    """``x[m, t]``: scenario-averaged maintenance and downtime cost of maintaining ``m`` at ``t``.

    Before failure it is the dynamic cost plus one period of idle penalty;
    at or after failure it is the corrective cost plus idle penalty for every
    period from the failure up to and including ``t``.
    """
    pf = instance.economics.idle_penalty
    F = instance.scenarios.failure_time[:, :, None].astype(float)  # (S, M, 1)
    t = np.arange(1, instance.horizon + 1, dtype=float)[None, None, :]
    cf = np.array([m.corrective_cost for m in instance.machines], dtype=float)[None, :, None]
    pre = instance.dmc[None, :, :] + pf
    post = cf + (t - F + 1.0) * pf
    return np.where(t < F, pre, post).mean(axis=0)


def build_throughput_cube(instance: Instance) -> ThroughputCube:
    S, M, T = instance.scenarios.n_scenarios, instance.n_machines, instance.horizon
    F = instance.scenarios.failure_time[:, :, None, None]  # (S, M, 1, 1)
    t = np.arange(1, T + 1)[None, None, :, None]
    l = np.arange(1, T + 1)[None, None, None, :]
    P = instance.scenarios.production_limit[:, :, None, :]  # P^s_{m,l}
    before = t <= F - 1
    zero = np.where(before, l == t, (F <= l) & (l <= t))
    lam = np.where(zero, 0.0, np.broadcast_to(P, (S, M, T, T)))
    return ThroughputCube(lam=lam)


def build_demand_penalty(instance: Instance, cube: ThroughputCube) -> np.ndarray:
    """``y[m, t] = P^d * mean_s sum_l max(D[m, l] - lam[s, m, t, l], 0)``."""
    D = instance.demand[None, :, None, :]
    short = np.maximum(D - cube.lam, 0.0).sum(axis=3)  # (S, M, T)
    return instance.economics.demand_penalty * short.mean(axis=0)


def assemble_features(instance: Instance) -> FeatureTensor:
    M, T, J = instance.n_machines, instance.horizon, instance.J
    x = build_maintenance_cost(instance)
    y = build_demand_penalty(instance, build_throughput_cube(instance))
    zeros = np.zeros((1, T))
    chi = np.repeat(np.vstack([x, zeros]), J, axis=1)
    yy = np.repeat(np.vstack([y, zeros]), J, axis=1)
    site = np.concatenate([instance.sites, [DEPOT]]).astype(np.int64)
    steps = np.arange(T * J)
    tensor = FeatureTensor(
        chi=chi,
        y=yy,
        site=site,
        n_real=M,
        n_idle=1,
        horizon=T,
        dup=J,
        time_frac=(steps // J + 1) / T,
        slot_frac=(steps % J) / J,
    )
    for a in (tensor.chi, tensor.y, tensor.site, tensor.time_frac, tensor.slot_frac):
        a.flags.writeable = False
    return tensor


def debug_dump(instance: Instance) -> str:
    """JSON with ``x``, ``y`` and the throughput cube, for golden-file comparisons."""
    cube = build_throughput_cube(instance)
    return json.dumps({
        "x": build_maintenance_cost(instance).tolist(),
        "y": build_demand_penalty(instance, cube).tolist(),
        "lam": cube.lam.tolist(),
    })
