"""Exact solvers for the canonical sequencing problem.

Both solvers minimize the same cost the policy is trained on: the sum of
``chi + Y`` over the picked (row, step) cells plus the travel cost for every
crew-site change, over sequences that maintain each machine exactly once.

Costs of complete sequences are accumulated with :func:`math.fsum`, so two
sequences picking the same cells (e.g. two machines swapped inside a period)
get bit-identical costs regardless of order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from attenmfg.core_model import EconomicParams
from attenmfg.embedding import DEPOT, FeatureTensor
from attenmfg.errors import BudgetExceededError

DEFAULT_NODE_BUDGET = 50_000_000
DEFAULT_TIME_BUDGET = 600.0
_REL_TOL = 1e-12
_MEMO_CAP = 5_000_000


def canonical_cost(seq, cost: np.ndarray, site: np.ndarray, travel_cost: float) -> float:
    terms = []
    crew = DEPOT
    for k, r in enumerate(seq):
        terms.append(float(cost[r, k]))
        if site[r] != crew:
            terms.append(travel_cost)
            crew = site[r]
    return math.fsum(terms)


@dataclass
class OracleResult:
    seq: list[int]
    cost: float
    proven: bool
    nodes: int
    ms: float = field(default=0.0, compare=False)

    def to_json(self) -> dict:
        return {"cost": self.cost, "seq": list(self.seq), "proven": self.proven,
                "nodes": self.nodes, "ms": self.ms}


def _unpack(features: FeatureTensor):
    cost = np.ascontiguousarray(features.cost)
    return cost, features.site.astype(np.int64), features.n_real, features.n_steps


def solve_exhaustive(features: FeatureTensor, economics: EconomicParams,
                     limit: int = DEFAULT_NODE_BUDGET) -> OracleResult:
    """Enumerate every feasible sequence; ties go to the lexicographically smallest."""
    t0 = time.perf_counter()
    cost, site, M, K = _unpack(features)
    if (M + 1) ** K > limit:
        raise BudgetExceededError(
            f"(M+1)^(T*J) = {M + 1}^{K} exceeds the enumeration budget {limit}; use solve_bnb"
        )
    delta = float(economics.travel_cost)
    idle = M
    seq = [0] * K
    used = [False] * M
    best_cost = math.inf
    best_seq: list[int] = []
    nodes = 0

    def rec(k: int, remaining: int) -> None:
        nonlocal best_cost, best_seq, nodes
        nodes += 1
        if k == K:
            c = canonical_cost(seq, cost, site, delta)
            if c < best_cost:
                best_cost, best_seq = c, list(seq)
            return
        for r in range(M + 1):
            if r == idle:
                if remaining == K - k:
                    continue
                seq[k] = r
                rec(k + 1, remaining)
            elif not used[r]:
                used[r] = True
                seq[k] = r
                rec(k + 1, remaining - 1)
                used[r] = False

    rec(0, M)
    return OracleResult(best_seq, best_cost, True, nodes, (time.perf_counter() - t0) * 1e3)


def greedy_sequence(features: FeatureTensor, economics: EconomicParams) -> list[int]:
    """Pick the cheapest admissible row (cell cost plus travel) at every step."""
    cost, site, M, K = _unpack(features)
    delta = float(economics.travel_cost)
    used = [False] * M
    remaining, crew = M, DEPOT
    seq = []
    for k in range(K):
        best_r, best_c = -1, math.inf
        for r in range(M + 1):
            if r == M and remaining == K - k:
                continue
            if r < M and used[r]:
                continue
            c = cost[r, k] + (delta if site[r] != crew else 0.0)
            if c < best_c:
                best_r, best_c = r, c
        seq.append(best_r)
        if best_r < M:
            used[best_r] = True
            remaining -= 1
        crew = site[best_r]
    return seq


def solve_bnb(features: FeatureTensor, economics: EconomicParams,
              time_budget: float = DEFAULT_TIME_BUDGET,
              node_budget: int | None = None) -> OracleResult:
    """Depth-first branch and bound.

    The bound at a node is the partial cost plus, for each unplaced machine,
    its cheapest remaining cell, plus one travel cost for every site that
    still has unplaced machines and is not the crew's current site.  Children
    are expanded by ascending incremental cost, then row index.  A table of
    the best partial cost per (step, placed set, crew site) prunes dominated
    nodes.  On timeout the incumbent is returned with ``proven=False``.
    """
    t0 = time.perf_counter()
    cost, site, M, K = _unpack(features)
    delta = float(economics.travel_cost)
    idle = M
    # suffix minimum of each machine's cost over steps >= k
    sufmin = np.minimum.accumulate(cost[:M, ::-1], axis=1)[:, ::-1] if M else np.zeros((0, K))
    sufmin = np.hstack([sufmin, np.full((M, 1), math.inf)]).tolist()
    cost_l = cost.tolist()
    site_l = site.tolist()
    machine_sites = site_l[:M]

    incumbent = greedy_sequence(features, economics)
    best_cost = canonical_cost(incumbent, cost, site, delta)
    best_seq = list(incumbent)
    seen: dict[tuple[int, int, int], float] = {}
    nodes = 0
    timed_out = False
    seq = [0] * K

    def bound(k: int, mask: int, crew: int) -> float:
        lb = 0.0
        sites = set()
        for m in range(M):
            if not mask >> m & 1:
                lb += sufmin[m][k]
                sites.add(machine_sites[m])
        sites.discard(crew)
        return lb + delta * len(sites)

    def rec(k: int, mask: int, crew: int, partial: float) -> None:
        nonlocal best_cost, best_seq, nodes, timed_out
        if timed_out:
            return
        nodes += 1
        if nodes & 1023 == 0:
            if time.perf_counter() - t0 > time_budget or (node_budget and nodes > node_budget):
                timed_out = True
                return
        if k == K:
            c = canonical_cost(seq, cost, site, delta)
            if c < best_cost:
                best_cost, best_seq = c, list(seq)
            return
        tol = _REL_TOL * abs(best_cost)
        key = (k, mask, crew)
        prev = seen.get(key)
        if prev is not None and partial >= prev - tol:
            return
        if prev is not None or len(seen) < _MEMO_CAP:
            seen[key] = partial
        if partial + bound(k, mask, crew) >= best_cost - tol:
            return
        remaining = M - bin(mask).count("1")
        children = []
        row = cost_l
        for r in range(M):
            if not mask >> r & 1:
                children.append((row[r][k] + (delta if site_l[r] != crew else 0.0), r))
        if remaining < K - k:
            children.append((row[idle][k] + (delta if crew != DEPOT else 0.0), idle))
        children.sort()
        for inc, r in children:
            seq[k] = r
            if r == idle:
                rec(k + 1, mask, DEPOT, partial + inc)
            else:
                rec(k + 1, mask | (1 << r), site_l[r], partial + inc)
            if timed_out:
                return

    rec(0, 0, DEPOT, 0.0)
    return OracleResult(best_seq, best_cost, not timed_out, nodes, (time.perf_counter() - t0) * 1e3)
