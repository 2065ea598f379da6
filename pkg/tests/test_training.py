import numpy as np
import pytest
import torch

from attenmfg.core_model import GeneratorConfig, config_from_name, generate_instance
from attenmfg.errors import NonFiniteGradientError
from attenmfg.policy import AttenMfgPolicy, PolicyConfig, params_digest
from attenmfg.training import (
    METRICS_HEADER,
    AdamState,
    TrainConfig,
    Trainer,
    adam_step,
    global_norm,
    metrics_csv,
    reinforce_grad,
    surrogate_loss,
    train,
)
from attenmfg.verification import check_gradient, toy_gradient_setup

TINY = PolicyConfig(d_h=8, n_layers=1, heads=2)
TINY_GEN = config_from_name("D_L2P3M4_J2")


def tiny_cfg(**kw):
    base = dict(epochs=2, instances_per_epoch=8, batch=4, baseline_rollouts=4, n_holdout=3, policy=TINY)
    base.update(kw)
    return TrainConfig(**base)


def grads_of(policy, feats, econ, seqs, adv):
    policy.zero_grad(set_to_none=True)
    surrogate_loss(policy, feats, econ, seqs, adv).backward()
    out = {n: p.grad.clone() for n, p in policy.named_parameters()}
    policy.zero_grad(set_to_none=True)
    return out


# -- gradient --------------------------------------------------------------------


def test_gradient_matches_finite_differences():
    r = check_gradient(seed=0)
    assert r.passed, r.values["errors"]
    assert len(r.values["errors"]) == sum(1 for _ in toy_gradient_setup(0)[0].parameters())


def test_identical_costs_give_zero_gradient():
    # one machine, one slot: every rollout is the same sequence
    gen = GeneratorConfig(n_machines=1, horizon=1, J=1, n_sites=1)
    pol = AttenMfgPolicy(TINY, seed=0)
    insts = [generate_instance(gen.with_seed(s)) for s in range(3)]
    res = reinforce_grad(pol, insts, 4, np.random.default_rng(0))
    assert np.all(res.costs == res.baselines)
    assert all(float(g.abs().max()) == 0.0 for g in res.grads.values())


def test_gradient_linear_in_advantage():
    pol, feats, econ, seqs, adv = toy_gradient_setup(1)
    g1 = grads_of(pol, feats, econ, seqs, adv)
    g2 = grads_of(pol, feats, econ, seqs, 2.0 * adv)
    for n in g1:
        assert torch.allclose(g2[n], 2.0 * g1[n], rtol=1e-12, atol=1e-15)


def test_mean_baseline_centres_advantages():
    pol = AttenMfgPolicy(TINY, seed=0)
    insts = [generate_instance(TINY_GEN.with_seed(s)) for s in range(3)]
    res = reinforce_grad(pol, insts, 5, np.random.default_rng(1))
    adv = (res.costs - res.baselines).reshape(3, 5)
    assert np.allclose(adv.sum(axis=1), 0.0, atol=1e-9)


def test_greedy_baseline_option():
    pol = AttenMfgPolicy(TINY, seed=0)
    insts = [generate_instance(TINY_GEN.with_seed(s)) for s in range(2)]
    res = reinforce_grad(pol, insts, 3, np.random.default_rng(1), baseline="greedy")
    b = res.baselines.reshape(2, 3)
    assert np.all(b == b[:, :1])


def test_nonfinite_gradient_names_parameter():
    pol = AttenMfgPolicy(TINY, seed=0)
    with torch.no_grad():
        pol.w_p.fill_(float("nan"))
    insts = [generate_instance(TINY_GEN.with_seed(0))]
    with pytest.raises((NonFiniteGradientError, AssertionError)):
        reinforce_grad(pol, insts, 2, np.random.default_rng(0))


# -- Adam ------------------------------------------------------------------------


class _Scalar(torch.nn.Module):
    def __init__(self, v):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([v], dtype=torch.float64))


def test_adam_scalar_oracle():
    mod = _Scalar(1.0)
    st = AdamState(0, {"w": torch.zeros(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)})
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.2, 0.3], start=1):
        adam_step(mod, {"w": torch.tensor([g], dtype=torch.float64)}, st, lr, grad_clip=None)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert float(mod.w.detach()) == pytest.approx(w, rel=1e-14)


def test_adam_first_step_moves_by_lr():
    mod = _Scalar(0.0)
    st = AdamState(0, {"w": torch.zeros(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)})
    adam_step(mod, {"w": torch.tensor([123.0], dtype=torch.float64)}, st, 0.01, grad_clip=None)
    assert float(mod.w.detach()) == pytest.approx(-0.01, rel=1e-9)


def test_zero_gradient_with_fresh_moments_leaves_params():
    pol = AttenMfgPolicy(TINY, seed=0)
    before = params_digest(pol)
    st = AdamState.zeros_like(pol)
    adam_step(pol, {n: torch.zeros_like(p) for n, p in pol.named_parameters()}, st, 0.1)
    assert params_digest(pol) == before and st.step == 1


def test_global_norm_clipping():
    mod = _Scalar(0.0)
    st = AdamState(0, {"w": torch.zeros(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)})
    norm = adam_step(mod, {"w": torch.tensor([-40.0], dtype=torch.float64)}, st, 0.01, grad_clip=1.0)
    assert norm == 40.0
    assert float(st.m["w"]) == pytest.approx(0.1 * -1.0)
    assert global_norm({"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}) == 5.0


# -- training loop ---------------------------------------------------------------


def test_training_is_deterministic():
    a, ma = train(tiny_cfg(), TINY_GEN)
    b, mb = train(tiny_cfg(), TINY_GEN)
    assert a == b
    assert [m.holdout_greedy_cost for m in ma] == [m.holdout_greedy_cost for m in mb]


def test_zero_learning_rate_keeps_holdout_constant():
    tr = Trainer(tiny_cfg(lr=0.0, epochs=3), TINY_GEN)
    start = params_digest(tr.policy)
    ms = tr.train()
    assert len({m.holdout_greedy_cost for m in ms}) == 1
    assert params_digest(tr.policy) == start


def test_resume_is_bit_identical():
    cfg = tiny_cfg(epochs=2)
    full = Trainer(cfg, TINY_GEN)
    full.train()

    part = Trainer(cfg, TINY_GEN)
    part.run_epoch()
    part.step()  # stop mid-epoch
    resumed = Trainer.from_checkpoint(part.checkpoint())
    resumed.train()
    assert resumed.checkpoint() == full.checkpoint()


def test_checkpoint_rejects_tampered_config():
    tr = Trainer(tiny_cfg(), TINY_GEN)
    data = tr.checkpoint().replace(b'"lr":0.0001', b'"lr":0.0002')
    with pytest.raises(ValueError, match="hash"):
        Trainer.from_checkpoint(data)


def test_metrics_csv_layout():
    _, ms = train(tiny_cfg(epochs=1), TINY_GEN)
    lines = metrics_csv(ms).splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[1].startswith("1,")


def test_train_config_round_trip_and_validation():
    cfg = tiny_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(baseline_rollouts=1)
    with pytest.raises(ValueError):
        TrainConfig(baseline="other")


def test_adam_constant_gradient_step_tends_to_lr():
    mod = _Scalar(0.0)
    st = AdamState(0, {"w": torch.zeros(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)})
    prev = 0.0
    for _ in range(200):
        adam_step(mod, {"w": torch.tensor([0.3], dtype=torch.float64)}, st, 0.01, grad_clip=None)
        cur = float(mod.w.detach())
        step = prev - cur
        prev = cur
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_zero_gradient_decays_moments():
    mod = _Scalar(0.0)
    st = AdamState(0, {"w": torch.zeros(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)})
    adam_step(mod, {"w": torch.tensor([1.0], dtype=torch.float64)}, st, 0.01, grad_clip=None)
    m, v = float(st.m["w"]), float(st.v["w"])
    adam_step(mod, {"w": torch.tensor([0.0], dtype=torch.float64)}, st, 0.01, grad_clip=None)
    assert float(st.m["w"]) == pytest.approx(0.9 * m) and float(st.v["w"]) == pytest.approx(0.999 * v)
