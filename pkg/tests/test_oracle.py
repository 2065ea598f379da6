import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from attenmfg.core_model import config_from_name, generate_instance
from attenmfg.embedding import assemble_features
from attenmfg.errors import BudgetExceededError
from attenmfg.evaluator import Schedule, check_feasible
from attenmfg.oracle import canonical_cost, greedy_sequence, solve_bnb, solve_exhaustive

from conftest import make_instance


def feats(name, seed, **kw):
    inst = generate_instance(config_from_name(name, seed=seed, **kw))
    return inst, assemble_features(inst)


def brute_force(f, delta):
    """Standalone enumeration of all (M+1)^(T*J) row sequences."""
    M, K = f.n_real, f.n_steps
    best = math.inf
    for seq in itertools.product(range(M + 1), repeat=K):
        if sorted(r for r in seq if r < M) != list(range(M)):
            continue
        c, crew = 0.0, 0
        terms = []
        for k, r in enumerate(seq):
            terms.append(f.cost[r, k])
            if f.site[r] != crew:
                terms.append(delta)
                crew = f.site[r]
        c = math.fsum(terms)
        best = min(best, c)
    return best


def test_single_machine_single_slot():
    inst = make_instance([[5]], [[3.0]], [[0.0]], idle=0.0)
    f = assemble_features(inst)
    r = solve_exhaustive(f, inst.economics)
    assert r.seq == [0] and r.cost == 3.0


def test_two_machines_no_travel_is_assignment():
    inst = make_instance([[5, 5]], [[1.0, 4.0], [2.0, 9.0]], np.zeros((2, 2)), idle=0.0)
    r = solve_exhaustive(assemble_features(inst), inst.economics)
    assert r.cost == min(1 + 9, 4 + 2)


def test_exhaustive_matches_standalone_enumeration():
    for seed in range(3):
        inst, f = feats("D_L2P3M5_J2", seed)
        r = solve_exhaustive(f, inst.economics)
        assert r.cost == brute_force(f, inst.economics.travel_cost)
        assert check_feasible(Schedule.from_seq(r.seq, f.n_real, f.horizon, f.dup), inst) == []


def test_exhaustive_budget_error():
    inst, f = feats("D_L2P4M6_J2", 0)
    with pytest.raises(BudgetExceededError, match="solve_bnb"):
        solve_exhaustive(f, inst.economics, limit=1000)


def test_exhaustive_tie_break_lexicographic():
    # all costs equal and no travel: every feasible sequence ties
    inst = make_instance([[9, 9]], np.ones((2, 2)), np.zeros((2, 2)), idle=0.0, J=2)
    r = solve_exhaustive(assemble_features(inst), inst.economics)
    assert r.seq == [0, 1, 2, 2]


@pytest.mark.parametrize("name", ["D_L2P3M4_J2", "D_L2P5M5_J1", "D_L3P3M5_J2", "D_L1P2M3_J2", "D_L3P3M4_J2"])
def test_bnb_matches_exhaustive(name):
    for seed in range(10):
        inst, f = feats(name, seed)
        b = solve_bnb(f, inst.economics)
        e = solve_exhaustive(f, inst.economics)
        assert b.proven and b.cost == e.cost


def test_bnb_assignment_oracle_single_site_free_travel():
    for seed in range(10):
        inst, f = feats("D_L1P4M6_J2", seed, travel_cost=0.0)
        b = solve_bnb(f, inst.economics)
        cost = f.cost[:f.n_real]
        rows, cols = linear_sum_assignment(cost)
        assert b.cost == pytest.approx(math.fsum(cost[rows, cols].tolist()), rel=1e-12)


def test_bnb_no_slack_matches_permutations():
    for seed in range(4):
        inst, f = feats("D_L2P3M6_J2", seed)
        b = solve_bnb(f, inst.economics)
        perm = min(canonical_cost(p, f.cost, f.site, inst.economics.travel_cost)
                   for p in itertools.permutations(range(f.n_real)))
        assert b.proven and b.cost == perm


def test_bnb_incumbent_not_worse_than_greedy():
    inst, f = feats("D_L3P5M8_J2", 1)
    g = canonical_cost(greedy_sequence(f, inst.economics), f.cost, f.site, inst.economics.travel_cost)
    assert solve_bnb(f, inst.economics).cost <= g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_optimum_monotone_in_travel_cost(seed, d1, d2):
    lo, hi = sorted((d1, d2))
    a = generate_instance(config_from_name("D_L2P3M4_J2", seed=seed, travel_cost=lo))
    b = generate_instance(config_from_name("D_L2P3M4_J2", seed=seed, travel_cost=hi))
    ca = solve_bnb(assemble_features(a), a.economics).cost
    cb = solve_bnb(assemble_features(b), b.economics).cost
    assert ca <= cb + 1e-9 * cb


def test_bnb_deterministic():
    inst, f = feats("D_L2P4M6_J2", 3)
    a, b = solve_bnb(f, inst.economics), solve_bnb(f, inst.economics)
    assert (a.seq, a.cost, a.nodes) == (b.seq, b.cost, b.nodes)


def test_bnb_timeout_returns_incumbent():
    inst, f = feats("L5P10M25", 0)
    r = solve_bnb(f, inst.economics, time_budget=0.2)
    assert not r.proven
    assert check_feasible(Schedule.from_seq(r.seq, f.n_real, f.horizon, f.dup), inst) == []


def test_result_json_fields():
    inst, f = feats("D_L2P3M4_J2", 0)
    d = solve_bnb(f, inst.economics).to_json()
    assert set(d) == {"cost", "seq", "proven", "nodes", "ms"}
    json.dumps(d)
