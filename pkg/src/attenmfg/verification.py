"""Invariant suites shared by the ``verify`` command and the acceptance tests.

Each check pits an implementation against a path that does not share code
with it: a period-by-period machine state simulation for the throughput
cube, the scheduling-program objective for the sequence cost, enumeration
and an assignment solver for branch and bound, and central finite
differences for the policy gradient.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from attenmfg.core_model import GeneratorConfig, Instance, config_from_name, generate_instance
from attenmfg.embedding import FeatureTensor, assemble_features, build_throughput_cube
from attenmfg.evaluator import Schedule, check_feasible, direct_mip_cost, sequence_cost
from attenmfg.oracle import canonical_cost, solve_bnb, solve_exhaustive
from attenmfg.policy import AttenMfgPolicy, PolicyConfig, batch_costs, make_batch, run_decoder
from attenmfg.training import surrogate_loss

RUNNING, DOWN, IN_MAINTENANCE, REPAIRED = range(4)


def simulate_throughput(instance: Instance) -> np.ndarray:
    """Production ``[s, m, t, l]`` by stepping each machine's state through the periods.

    A machine runs until its failure period, sits down until its maintenance
    period, produces nothing while maintained, and runs for the rest of the
    horizon afterwards.
    """
    S, M, T = instance.scenarios.n_scenarios, instance.n_machines, instance.horizon
    out = np.zeros((S, M, T, T))
    for s in range(S):
        for m in range(M):
            fail = int(instance.scenarios.failure_time[s, m])
            for t in range(1, T + 1):
                state = RUNNING
                for l in range(1, T + 1):
                    if l == t:
                        state = IN_MAINTENANCE
                    elif state == IN_MAINTENANCE:
                        state = REPAIRED
                    elif state == RUNNING and l >= fail:
                        state = DOWN
                    producing = state in (RUNNING, REPAIRED)
                    out[s, m, t - 1, l - 1] = instance.scenarios.production_limit[s, m, l - 1] if producing else 0.0
    return out


def random_feasible_seq(n_real: int, n_steps: int, rng: np.random.Generator) -> list[int]:
    return rng.permutation(list(range(n_real)) + [n_real] * (n_steps - n_real)).tolist()


def desk_instances(n: int, seed: int, names=("D_L2P4M6_J2", "D_L3P5M8_J2", "LRP3M4", "D_L2P3M5_J2")) -> list[Instance]:
    rng = np.random.default_rng(seed)
    return [generate_instance(config_from_name(names[i % len(names)], seed=int(rng.integers(2**31))))
            for i in range(n)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_dual_path(n_instances: int = 100, n_schedules: int = 10, seed: int = 0,
                    tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for inst in desk_instances(n_instances, seed):
        f = assemble_features(inst)
        for _ in range(n_schedules):
            sched = Schedule.from_seq(random_feasible_seq(f.n_real, f.n_steps, rng), f.n_real, f.horizon, f.dup)
            a = sequence_cost(sched, f, inst.economics).total
            b = direct_mip_cost(sched, inst).total
            worst = max(worst, abs(a - b) / abs(b))
    return CheckResult("dual-path cost equality", worst <= tol,
                       f"max relative difference {worst:.3e} (tol {tol:g})", {"max_rel": worst})


def check_throughput_cube(n_instances: int = 50, seed: int = 0) -> CheckResult:
    names = ("D_L2P4M6_J2", "D_L2P5M6_J2", "D_L3P3M4_J2", "D_L1P2M2_J1")
    bad = 0
    for inst in desk_instances(n_instances, seed, names):
        if not np.array_equal(build_throughput_cube(inst).lam, simulate_throughput(inst)):
            bad += 1
    return CheckResult("throughput cube vs state simulation", bad == 0,
                       f"{bad} of {n_instances} instances differ", {"mismatches": bad})


def check_masking(n_rollouts: int = 10_000, n_instances: int = 50, seed: int = 0,
                  policy: AttenMfgPolicy | None = None) -> CheckResult:
    """Sample rollouts from an untrained policy and count constraint violations."""
    policy = policy or AttenMfgPolicy(PolicyConfig(d_h=32, heads=4, n_layers=2), seed=seed)
    rng = np.random.default_rng(seed)
    per = -(-n_rollouts // n_instances)
    total = violations = 0
    for inst in desk_instances(n_instances, seed + 1):
        f = assemble_features(inst)
        batch = make_batch([f], [inst.economics])
        with torch.no_grad():
            cache = policy.precompute(policy.encode(batch)).repeat(per)
            seqs, _ = run_decoder(policy, cache, batch.repeat(per), "sample", rng)
        for seq in seqs:
            if check_feasible(Schedule.from_seq(seq, f.n_real, f.horizon, f.dup), inst):
                violations += 1
            total += 1
    return CheckResult("masking feasibility", violations == 0,
                       f"{violations} violations in {total} sampled rollouts over {n_instances} instances",
                       {"violations": violations, "rollouts": total})


def toy_gradient_setup(seed: int = 0):
    """D_h=8 policy, one M=3/T=2/J=2 instance on two sites, K=4 frozen sampled rollouts.

    Weights are redrawn from U(-1, 1).  At the default init the encodings are
    nearly uniform and the decoder-query gradients sit around 1e-7, where
    central differences at eps=1e-5 are dominated by roundoff.
    """
    inst = generate_instance(GeneratorConfig(n_machines=3, horizon=2, J=2, n_sites=2, seed=seed))
    policy = AttenMfgPolicy(PolicyConfig(d_h=8, heads=2, n_layers=2), seed=seed)
    wrng = np.random.default_rng([seed, 1])
    with torch.no_grad():
        for p in policy.parameters():
            p.copy_(torch.from_numpy(wrng.uniform(-1.0, 1.0, tuple(p.shape))))
    f = assemble_features(inst)
    rng = np.random.default_rng(seed)
    batch = make_batch([f], [inst.economics])
    k = 4
    with torch.no_grad():
        cache = policy.precompute(policy.encode(batch)).repeat(k)
        seqs, _ = run_decoder(policy, cache, batch.repeat(k), "sample", rng)
    costs = batch_costs(seqs, batch.repeat(k))
    adv = costs - costs.mean()
    return policy, [f], [inst.economics], seqs, adv


def check_gradient(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    """Autograd vs central finite differences of the frozen-rollout surrogate, per tensor."""
    policy, feats, econ, seqs, adv = toy_gradient_setup(seed)
    policy.zero_grad(set_to_none=True)
    surrogate_loss(policy, feats, econ, seqs, adv).backward()
    worst = {}
    with torch.no_grad():
        for name, p in policy.named_parameters():
            analytic = p.grad.detach().numpy().ravel().copy()
            fd = np.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(surrogate_loss(policy, feats, econ, seqs, adv))
                flat[i] = orig - eps
                down = float(surrogate_loss(policy, feats, econ, seqs, adv))
                flat[i] = orig
                fd[i] = (up - down) / (2 * eps)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
            worst[name] = float(np.linalg.norm(analytic - fd) / denom)
    policy.zero_grad(set_to_none=True)
    top = max(worst.values())
    return CheckResult("gradient vs finite differences", top < tol,
                       f"max per-tensor relative error {top:.2e} over {len(worst)} tensors (tol {tol:g})",
                       {"errors": worst})


def assignment_optimum(features: FeatureTensor) -> float:
    """Optimal cost when travel is free: machines assigned to distinct decoding slots."""
    cost = features.cost[:features.n_real]
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols].tolist())


def permutation_optimum(features: FeatureTensor, travel_cost: float) -> float:
    """Brute force over machine orders when there is no idle slack (M == T*J)."""
    return min(canonical_cost(p, features.cost, features.site, travel_cost)
               for p in itertools.permutations(range(features.n_real)))


def check_oracle(n_instances: int = 50, seed: int = 0, include_assignment: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    # every preset keeps (M+1)^(T*J) <= 1e6
    names = ("D_L2P3M4_J2", "D_L2P5M5_J1", "D_L3P3M5_J2", "D_L1P2M3_J2", "D_L3P3M4_J2")
    mism = checked = 0
    for i in range(n_instances):
        inst = generate_instance(config_from_name(names[i % len(names)], seed=int(rng.integers(2**31))))
        f = assemble_features(inst)
        b = solve_bnb(f, inst.economics)
        e = solve_exhaustive(f, inst.economics, limit=10**6)
        checked += 1
        if not (b.proven and b.cost == e.cost):
            mism += 1
    amism = 0
    for i in range(include_assignment):
        cfg = config_from_name("D_L1P4M6_J2", seed=int(rng.integers(2**31)), travel_cost=0.0)
        inst = generate_instance(cfg)
        f = assemble_features(inst)
        b = solve_bnb(f, inst.economics)
        if not (b.proven and math.isclose(b.cost, assignment_optimum(f), rel_tol=1e-12)):
            amism += 1
    ok = mism == 0 and amism == 0
    return CheckResult("oracle optimality", ok,
                       f"bnb vs enumeration: {mism} mismatches / {checked}; "
                       f"bnb vs assignment (L=1, travel 0): {amism} / {include_assignment}",
                       {"mismatches": mism, "assignment_mismatches": amism, "checked": checked})
