"""REINFORCE training of the attention policy.

Each instance in a batch is decoded ``K`` times by sampling; the mean cost of
those rollouts is the baseline for all of them.  The loss whose gradient we
take is ``mean((cost - baseline) * log p(sequence))`` with costs held
constant, which is the usual score-function estimator.  Parameters are
updated with Adam after clipping the global gradient norm.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from attenmfg.core_model import EconomicParams, GeneratorConfig, Instance, generate_instance
from attenmfg.embedding import FeatureTensor, assemble_features
from attenmfg.errors import NonFiniteGradientError
from attenmfg.policy import (
    AttenMfgPolicy,
    PolicyConfig,
    batch_costs,
    decode_checkpoint,
    encode_checkpoint,
    make_batch,
    policy_tensors,
    run_decoder,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_mean_cost", "holdout_greedy_cost", "grad_norm", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    instances_per_epoch: int = 12800
    batch: int = 16
    lr: float = 1e-4
    baseline_rollouts: int = 8
    seed: int = 0
    grad_clip: float = 1.0
    baseline: str = "mean"  # or "greedy"
    n_holdout: int = 20
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self) -> None:
        if min(self.epochs, self.instances_per_epoch, self.batch, self.n_holdout) < 1:
            raise ValueError("epochs, instances_per_epoch, batch and n_holdout must be positive")
        if self.lr < 0 or self.grad_clip <= 0:
            raise ValueError("lr must be >= 0 and grad_clip > 0")
        if self.baseline == "mean" and self.baseline_rollouts < 2:
            raise ValueError("the rollout-mean baseline needs K >= 2")
        if self.baseline not in ("mean", "greedy"):
            raise ValueError(f"unknown baseline {self.baseline!r}")

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.instances_per_epoch // self.batch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("policy"), dict):
            d["policy"] = PolicyConfig(**d["policy"])
        return cls(**d)


def config_hash(train_cfg: TrainConfig, gen_cfg: GeneratorConfig) -> str:
    blob = json.dumps({"train": train_cfg.to_dict(), "gen": gen_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# gradient estimator


@dataclass
class GradResult:
    grads: dict[str, torch.Tensor]
    costs: np.ndarray  # (B*K,) sampled rollout costs
    baselines: np.ndarray  # (B*K,)
    seqs: np.ndarray

    @property
    def mean_cost(self) -> float:
        return float(self.costs.mean())


def surrogate_loss(policy: AttenMfgPolicy, features: Sequence[FeatureTensor],
                   economics: Sequence[EconomicParams], seqs: np.ndarray,
                   advantages: np.ndarray) -> torch.Tensor:
    """``mean(advantage * log p(seq))`` for fixed sequences; its gradient is the REINFORCE estimate.

    ``seqs`` holds ``K`` consecutive rows per instance.
    """
    batch = make_batch(features, economics)
    k = len(seqs) // batch.size
    cache = policy.precompute(policy.encode(batch)).repeat(k)
    _, logp = run_decoder(policy, cache, batch.repeat(k), "forced", actions=seqs)
    adv = torch.as_tensor(advantages, dtype=logp.dtype)
    return (adv * logp).mean()


def sample_batch(policy: AttenMfgPolicy, features: Sequence[FeatureTensor],
                 economics: Sequence[EconomicParams], k: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    batch = make_batch(features, economics)
    with torch.no_grad():
        cache = policy.precompute(policy.encode(batch)).repeat(k)
        seqs, _ = run_decoder(policy, cache, batch.repeat(k), "sample", rng)
    return seqs, batch_costs(seqs, batch.repeat(k))


def greedy_costs(policy: AttenMfgPolicy, features: Sequence[FeatureTensor],
                 economics: Sequence[EconomicParams]) -> np.ndarray:
    batch = make_batch(features, economics)
    with torch.no_grad():
        cache = policy.precompute(policy.encode(batch))
        seqs, _ = run_decoder(policy, cache, batch, "greedy")
    return batch_costs(seqs, batch)


def reinforce_grad(policy: AttenMfgPolicy, instances: Sequence[Instance], k: int,
                   rng: np.random.Generator, baseline: str = "mean",
                   features: Sequence[FeatureTensor] | None = None) -> GradResult:
    """Sample ``k`` rollouts per instance and return the baseline-corrected policy gradient."""
    if baseline == "mean" and k < 2:
        raise ValueError("the rollout-mean baseline needs K >= 2")
    feats = list(features) if features is not None else [assemble_features(i) for i in instances]
    econ = [i.economics for i in instances]
    seqs, costs = sample_batch(policy, feats, econ, k, rng)
    if baseline == "mean":
        b = np.repeat(costs.reshape(-1, k).mean(axis=1), k)
    else:
        b = np.repeat(greedy_costs(policy, feats, econ), k)
    policy.zero_grad(set_to_none=True)
    loss = surrogate_loss(policy, feats, econ, seqs, costs - b)
    loss.backward()
    grads = {}
    for name, p in policy.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
        grads[name] = g
    policy.zero_grad(set_to_none=True)
    return GradResult(grads, costs, b, seqs)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, policy: AttenMfgPolicy) -> "AdamState":
        return cls(0, {n: torch.zeros_like(p) for n, p in policy.named_parameters()},
                   {n: torch.zeros_like(p) for n, p in policy.named_parameters()})


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g * g).sum() for g in grads.values())))


def adam_step(policy: AttenMfgPolicy, grads: dict[str, torch.Tensor], state: AdamState, lr: float,
              grad_clip: float | None = 1.0, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> float:
    """In-place Adam update; returns the pre-clipping gradient norm."""
    b1, b2 = betas
    norm = global_norm(grads)
    factor = grad_clip / norm if grad_clip is not None and norm > grad_clip else 1.0
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in policy.named_parameters():
            g = grads[name] * factor
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return norm


# ---------------------------------------------------------------------------
# training loop


def _instance_seed(seed: int, stream: int, epoch: int, index: int) -> int:
    ss = np.random.SeedSequence([seed, stream, epoch, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def holdout_instances(gen_cfg: GeneratorConfig, seed: int, n: int) -> list[Instance]:
    return [generate_instance(gen_cfg.with_seed(_instance_seed(seed, 1, 0, i))) for i in range(n)]


@dataclass
class EpochMetrics:
    epoch: int
    train_mean_cost: float
    holdout_greedy_cost: float
    grad_norm: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_mean_cost), repr(self.holdout_greedy_cost),
                repr(self.grad_norm), f"{self.seconds:.3f}"]


class Trainer:
    """Owns the policy, optimizer moments and sampling RNG during training.

    ``step()`` processes one batch.  ``checkpoint()`` captures everything needed
    to continue bit-identically in single-threaded mode.
    """

    def __init__(self, train_cfg: TrainConfig, gen_cfg: GeneratorConfig,
                 policy: AttenMfgPolicy | None = None) -> None:
        self.cfg = train_cfg
        self.gen_cfg = gen_cfg
        self.policy = policy or AttenMfgPolicy(train_cfg.policy, seed=train_cfg.seed)
        self.adam = AdamState.zeros_like(self.policy)
        self.rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))
        self.epoch = 0
        self.batch_index = 0
        self._holdout: list[tuple[FeatureTensor, EconomicParams]] | None = None
        self._epoch_costs: list[float] = []
        self._epoch_norms: list[float] = []

    # -- data --------------------------------------------------------------

    def batch_instances(self, epoch: int, batch_index: int) -> list[Instance]:
        start = batch_index * self.cfg.batch
        stop = min(start + self.cfg.batch, self.cfg.instances_per_epoch)
        return [generate_instance(self.gen_cfg.with_seed(_instance_seed(self.cfg.seed, 0, epoch, i)))
                for i in range(start, stop)]

    def holdout_cost(self) -> float:
        if self._holdout is None:
            insts = holdout_instances(self.gen_cfg, self.cfg.seed, self.cfg.n_holdout)
            self._holdout = [(assemble_features(i), i.economics) for i in insts]
        feats, econ = zip(*self._holdout)
        return float(greedy_costs(self.policy, feats, econ).mean())

    # -- optimization ------------------------------------------------------

    def step(self) -> tuple[float, float]:
        """One minibatch update; returns (mean sampled cost, gradient norm)."""
        insts = self.batch_instances(self.epoch, self.batch_index)
        res = reinforce_grad(self.policy, insts, self.cfg.baseline_rollouts, self.rng, self.cfg.baseline)
        norm = adam_step(self.policy, res.grads, self.adam, self.cfg.lr, self.cfg.grad_clip)
        self._epoch_costs.append(res.mean_cost)
        self._epoch_norms.append(norm)
        self.batch_index += 1
        return res.mean_cost, norm

    def run_epoch(self) -> EpochMetrics:
        t0 = time.perf_counter()
        while self.batch_index < self.cfg.batches_per_epoch:
            self.step()
        m = EpochMetrics(
            epoch=self.epoch + 1,
            train_mean_cost=float(np.mean(self._epoch_costs)),
            holdout_greedy_cost=self.holdout_cost(),
            grad_norm=float(np.mean(self._epoch_norms)),
            seconds=time.perf_counter() - t0,
        )
        self.epoch += 1
        self.batch_index = 0
        self._epoch_costs, self._epoch_norms = [], []
        log.info("epoch %d: train %.2f holdout %.2f |g| %.3g (%.1fs)", m.epoch, m.train_mean_cost,
                 m.holdout_greedy_cost, m.grad_norm, m.seconds)
        return m

    def train(self, on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
        out = []
        while self.epoch < self.cfg.epochs:
            m = self.run_epoch()
            out.append(m)
            if on_epoch:
                on_epoch(m)
        return out

    # -- checkpoints ---------------------------------------------------------

    def checkpoint(self) -> bytes:
        tensors = policy_tensors(self.policy)
        for n in list(tensors):
            tensors[f"adam.m.{n}"] = self.adam.m[n].numpy().copy()
        for n in [k for k in tensors if not k.startswith("adam.")]:
            tensors[f"adam.v.{n}"] = self.adam.v[n].numpy().copy()
        meta = {
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "adam_step": self.adam.step,
            "rng_state": self.rng.bit_generator.state,
            "config_hash": config_hash(self.cfg, self.gen_cfg),
            "train_config": self.cfg.to_dict(),
            "generator_config": self.gen_cfg.to_dict(),
            "epoch_costs": self._epoch_costs,
            "epoch_norms": self._epoch_norms,
        }
        return encode_checkpoint(tensors, asdict(self.cfg.policy), meta)

    @classmethod
    def from_checkpoint(cls, data: bytes) -> "Trainer":
        tensors, hyper, meta = decode_checkpoint(data)
        train_cfg = TrainConfig.from_dict(meta["train_config"])
        gen_cfg = GeneratorConfig.from_dict(meta["generator_config"])
        if config_hash(train_cfg, gen_cfg) != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        tr = cls(train_cfg, gen_cfg, AttenMfgPolicy(PolicyConfig(**hyper)))
        with torch.no_grad():
            for n, p in tr.policy.named_parameters():
                p.copy_(torch.from_numpy(tensors[n]))
                tr.adam.m[n] = torch.from_numpy(tensors[f"adam.m.{n}"].copy())
                tr.adam.v[n] = torch.from_numpy(tensors[f"adam.v.{n}"].copy())
        tr.adam.step = int(meta["adam_step"])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.epoch = int(meta["epoch"])
        tr.batch_index = int(meta["batch_index"])
        tr._epoch_costs = list(meta.get("epoch_costs", []))
        tr._epoch_norms = list(meta.get("epoch_norms", []))
        return tr


def train(train_cfg: TrainConfig, gen_cfg: GeneratorConfig,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> tuple[bytes, list[EpochMetrics]]:
    """Train from scratch; returns the final checkpoint bytes and per-epoch metrics."""
    trainer = Trainer(train_cfg, gen_cfg)
    metrics = trainer.train(on_epoch)
    return trainer.checkpoint(), metrics


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    lines = [",".join(METRICS_HEADER)]
    lines += [",".join(m.row()) for m in metrics]
    return "\n".join(lines) + "\n"



# Named training setups: preset -> (generator model name, TrainConfig).
# "desk" is sized to finish well inside half an hour on one CPU core; "full"
# keeps the full-scale defaults.
TRAIN_PRESETS: dict[str, tuple[str, TrainConfig]] = {
    "tiny": ("D_L2P3M4_J2", TrainConfig(
        epochs=2, instances_per_epoch=64, batch=8, lr=1e-3, baseline_rollouts=4, n_holdout=5,
        policy=PolicyConfig(d_h=16, n_layers=1, heads=2))),
    "desk": ("D_L2P4M6_J2", TrainConfig(
        epochs=40, instances_per_epoch=1280, batch=16, lr=1e-3, baseline_rollouts=8,
        policy=PolicyConfig(d_h=64, n_layers=1, heads=8))),
    "full": ("L10P20M50", TrainConfig()),
}
