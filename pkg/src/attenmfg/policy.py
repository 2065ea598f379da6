"""Attention encoder/decoder policy over the (row, step) feature grid.

The encoder stacks ``n_layers`` blocks; each block runs multi-head
self-attention across rows (machines at one step) and across columns (steps
of one machine) in parallel, then fuses the two with a sigmoid gate layer.
The decoder walks the steps in order; at step ``k`` it reads encoder column
``k``, builds a context from the last picked row and the column sum, attends
over all rows and scores each row with a clipped ``tanh`` compatibility.
Rows that would break feasibility are masked to ``-inf`` before the softmax.

Everything runs in float64 on CPU.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn

from attenmfg.core_model import EconomicParams, Instance, MAX_SITES
from attenmfg.embedding import FeatureTensor, assemble_features
from attenmfg.evaluator import Schedule, sequence_cost

DTYPE = torch.float64
N_FEATURES = 4  # chi, y (both scaled), period / T, slot / J
SITE_VOCAB = MAX_SITES + 1  # depot + sites 1..10
CKPT_MAGIC = b"attenmfg-ckpt/1\n"


@dataclass(frozen=True)
class PolicyConfig:
    d_h: int = 128
    n_layers: int = 3
    heads: int = 8
    logit_clip: float = 10.0

    def __post_init__(self) -> None:
        if self.d_h % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_h={self.d_h}")


class AttenMfgPolicy(nn.Module):
    """Parameters are registered in a fixed order; checkpoints rely on it."""

    def __init__(self, config: PolicyConfig = PolicyConfig(), seed: int = 0) -> None:
        super().__init__()
        self.config = config
        D = config.d_h
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(D)

        def p(*shape: int) -> nn.Parameter:
            return nn.Parameter(torch.tensor(rng.uniform(-bound, bound, size=shape), dtype=DTYPE))

        self.input_w = p(D, N_FEATURES)
        self.input_b = p(D)
        self.site_embed = p(SITE_VOCAB, D)
        self.layers = nn.ModuleList()
        for _ in range(config.n_layers):
            layer = nn.Module()
            for part in ("spatial", "temporal"):
                for w in ("wq", "wk", "wv"):
                    layer.register_parameter(f"{part}_{w}", p(D, D))
            layer.wI = p(D, 2 * D)
            self.layers.append(layer)
        self.w_cq = p(D, 2 * D)
        self.w_ck = p(D, D)
        self.w_cv = p(D, D)
        self.w_p = p(D, D)

    # -- encoder ----------------------------------------------------------

    def embed_inputs(self, batch: "FeatureBatch") -> torch.Tensor:
        """Affine projection of the four channels plus a learned site vector: ``(B, R, C, D)``."""
        x = batch.inputs @ self.input_w.T + self.input_b
        return x + self.site_embed[batch.site][:, :, None, :]

    def encode(self, batch: "FeatureBatch") -> torch.Tensor:
        h = self.embed_inputs(batch)
        for layer in self.layers:
            hs = spatial_attention(h, layer.spatial_wq, layer.spatial_wk, layer.spatial_wv, self.config.heads)
            ht = temporal_attention(h, layer.temporal_wq, layer.temporal_wk, layer.temporal_wv,
                                    self.config.heads)
            h = integrate(hs, ht, layer.wI)
        return h

    # -- decoder ----------------------------------------------------------

    def precompute(self, enc: torch.Tensor) -> "DecoderCache":
        return DecoderCache(
            h=enc,
            keys=enc @ self.w_ck.T,
            values=enc @ self.w_cv.T,
            pointer=enc @ self.w_p.T,
        )

    def step_logits(self, cache: "DecoderCache", state: "DecoderState") -> torch.Tensor:
        """Pre-mask logits ``(B, R)`` in ``[-logit_clip, logit_clip]``."""
        k = state.step
        D, heads = self.config.d_h, self.config.heads
        h_col = cache.h[:, :, k, :]  # (B, R, D)
        B, R, _ = h_col.shape
        h_last = h_col[torch.arange(B), state.last_selected]
        context = torch.cat([h_last, h_col.sum(dim=1)], dim=-1)  # (B, 2D)
        q = (context @ self.w_cq.T).view(B, heads, 1, D // heads)
        keys = cache.keys[:, :, k, :].view(B, R, heads, D // heads).transpose(1, 2)
        vals = cache.values[:, :, k, :].view(B, R, heads, D // heads).transpose(1, 2)
        att = torch.softmax(q @ keys.transpose(-1, -2) / math.sqrt(D), dim=-1)  # (B, h, 1, R)
        glimpse = (att @ vals).reshape(B, D)
        compat = (cache.pointer[:, :, k, :] @ glimpse[:, :, None]).squeeze(-1)  # (B, R)
        return self.config.logit_clip * torch.tanh(compat)

    def decode_step(self, cache: "DecoderCache", state: "DecoderState") -> torch.Tensor:
        """Masked log-probabilities over rows for the current step."""
        forbidden = state.forbidden()
        if bool((forbidden.all(dim=1)).any()):
            raise AssertionError("decoder state admits no row")
        logits = self.step_logits(cache, state).masked_fill(forbidden, -math.inf)
        return torch.log_softmax(logits, dim=-1)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads).transpose(-2, -3)


def _merge(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-2, -3)
    return x.reshape(*x.shape[:-2], -1)


def _self_attention(h: torch.Tensor, wq, wk, wv, heads: int) -> torch.Tensor:
    """Multi-head self-attention over the second-to-last axis of ``h``."""
    D = h.shape[-1]
    q = _heads(h @ wq.T, heads)
    k = _heads(h @ wk.T, heads)
    v = _heads(h @ wv.T, heads)
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D), dim=-1)
    return _merge(att @ v)


def spatial_attention(h: torch.Tensor, wq, wk, wv, heads: int) -> torch.Tensor:
    """Attention across rows at every fixed column; ``h`` is ``(..., R, C, D)``."""
    out = _self_attention(h.transpose(-2, -3), wq, wk, wv, heads)
    return out.transpose(-2, -3)


def temporal_attention(h: torch.Tensor, wq, wk, wv, heads: int) -> torch.Tensor:
    """Attention across columns at every fixed row; ``h`` is ``(..., R, C, D)``."""
    return _self_attention(h, wq, wk, wv, heads)


def integrate(hs: torch.Tensor, ht: torch.Tensor, wI: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(torch.cat([hs, ht], dim=-1) @ wI.T)


# ---------------------------------------------------------------------------
# batching and decoder state


@dataclass
class FeatureBatch:
    """Stacked feature tensors of same-shaped instances."""

    inputs: torch.Tensor  # (B, R, C, 4), chi and y divided by the per-instance scale
    site: torch.Tensor  # (B, R) long
    cost: np.ndarray  # (B, R, C) unscaled chi + y
    site_np: np.ndarray  # (B, R)
    travel_cost: np.ndarray  # (B,)
    scale: np.ndarray  # (B,)
    n_real: int
    n_steps: int

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def repeat(self, k: int) -> "FeatureBatch":
        """Each instance repeated ``k`` times consecutively."""
        return FeatureBatch(
            self.inputs.repeat_interleave(k, 0), self.site.repeat_interleave(k, 0),
            np.repeat(self.cost, k, 0), np.repeat(self.site_np, k, 0),
            np.repeat(self.travel_cost, k), np.repeat(self.scale, k), self.n_real, self.n_steps,
        )


def feature_scale(f: FeatureTensor) -> float:
    s = float(np.max(np.abs(f.chi + f.y))) if f.chi.size else 0.0
    return s if s > 0 else 1.0


def make_batch(features: Sequence[FeatureTensor], economics: Sequence[EconomicParams]) -> FeatureBatch:
    f0 = features[0]
    if any(f.chi.shape != f0.chi.shape or f.n_real != f0.n_real for f in features):
        raise ValueError("all instances in a batch must share M, T and J")
    inputs, scales = [], []
    for f in features:
        s = feature_scale(f)
        scales.append(s)
        R, C = f.chi.shape
        inputs.append(np.stack([
            f.chi / s,
            f.y / s,
            np.broadcast_to(f.time_frac, (R, C)),
            np.broadcast_to(f.slot_frac, (R, C)),
        ], axis=-1))
    if any(int(f.site.max(initial=0)) >= SITE_VOCAB for f in features):
        raise ValueError(f"site ids must be below {SITE_VOCAB}")
    site = np.stack([f.site for f in features])
    return FeatureBatch(
        inputs=torch.tensor(np.stack(inputs), dtype=DTYPE),
        site=torch.tensor(site, dtype=torch.long),
        cost=np.stack([f.cost for f in features]),
        site_np=site,
        travel_cost=np.array([e.travel_cost for e in economics], dtype=float),
        scale=np.array(scales),
        n_real=f0.n_real,
        n_steps=f0.n_steps,
    )


@dataclass
class DecoderCache:
    h: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor
    pointer: torch.Tensor

    def repeat(self, k: int) -> "DecoderCache":
        return DecoderCache(*(t.repeat_interleave(k, 0) for t in (self.h, self.keys, self.values, self.pointer)))


@dataclass
class DecoderState:
    """Masking state shared by a batch of partial sequences.

    A real row is forbidden once selected; the idle row is forbidden when the
    machines still to be placed exactly fill the remaining steps.
    """

    step: int
    n_steps: int
    selected: torch.Tensor  # (B, M) bool
    last_selected: torch.Tensor  # (B,) long, idle row before the first pick
    crew_site: torch.Tensor  # (B,) long

    @classmethod
    def initial(cls, batch_size: int, n_real: int, n_steps: int) -> "DecoderState":
        return cls(0, n_steps, torch.zeros(batch_size, n_real, dtype=torch.bool),
                   torch.full((batch_size,), n_real, dtype=torch.long),
                   torch.zeros(batch_size, dtype=torch.long))

    @property
    def remaining_real(self) -> torch.Tensor:
        return self.selected.shape[1] - self.selected.sum(dim=1)

    def forbidden(self) -> torch.Tensor:
        idle_blocked = self.remaining_real == (self.n_steps - self.step)
        return torch.cat([self.selected, idle_blocked[:, None]], dim=1)

    def advance(self, actions: torch.Tensor, site: torch.Tensor) -> "DecoderState":
        M = self.selected.shape[1]
        sel = self.selected.clone()
        real = actions < M
        idx = torch.nonzero(real).squeeze(-1)
        sel[idx, actions[idx]] = True
        crew = site[torch.arange(len(actions)), actions]
        return DecoderState(self.step + 1, self.n_steps, sel, actions.clone(), crew)


# ---------------------------------------------------------------------------
# rollouts


def _sample(logp: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    probs = np.exp(logp.detach().numpy())
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cum[:, -1]
    picks = (cum > u[:, None]).argmax(axis=1)
    return torch.tensor(picks, dtype=torch.long)


def run_decoder(policy: AttenMfgPolicy, cache: DecoderCache, batch: FeatureBatch,
                mode: str = "greedy", rng: np.random.Generator | None = None,
                actions: np.ndarray | None = None) -> tuple[np.ndarray, torch.Tensor]:
    """Decode a batch; returns sequences ``(B, T*J)`` and summed log-probabilities ``(B,)``.

    ``mode`` is ``"greedy"`` (argmax, lowest row on ties), ``"sample"`` (draws
    from ``rng``) or ``"forced"`` (score the given ``actions``).
    """
    B = batch.size
    state = DecoderState.initial(B, batch.n_real, batch.n_steps)
    seqs = np.empty((B, batch.n_steps), dtype=np.int64)
    total = torch.zeros(B, dtype=DTYPE)
    rows = torch.arange(B)
    for k in range(batch.n_steps):
        logp = policy.decode_step(cache, state)
        if mode == "greedy":
            a = torch.argmax(logp, dim=1)
        elif mode == "sample":
            a = _sample(logp, rng)
        elif mode == "forced":
            a = torch.as_tensor(actions[:, k], dtype=torch.long)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        chosen = logp[rows, a]
        if not bool(torch.isfinite(chosen).all()):
            raise AssertionError("a forbidden row was selected")
        total = total + chosen
        seqs[:, k] = a.numpy()
        state = state.advance(a, batch.site)
    return seqs, total


def batch_costs(seqs: np.ndarray, batch: FeatureBatch) -> np.ndarray:
    """Canonical (unscaled) cost of each decoded sequence."""
    B, K = seqs.shape
    cells = batch.cost[np.arange(B)[:, None], seqs, np.arange(K)[None, :]].sum(axis=1)
    crew = np.take_along_axis(batch.site_np, seqs, axis=1)
    prev = np.concatenate([np.zeros((B, 1), dtype=crew.dtype), crew[:, :-1]], axis=1)
    return cells + (crew != prev).sum(axis=1) * batch.travel_cost


@dataclass
class RolloutResult:
    schedule: Schedule
    log_prob: float
    cost: float


def rollout(instance: Instance, policy: AttenMfgPolicy, mode: str = "greedy",
            rng: np.random.Generator | None = None,
            features: FeatureTensor | None = None) -> RolloutResult:
    """Decode one schedule for ``instance`` and price it with the sequence cost."""
    features = features if features is not None else assemble_features(instance)
    batch = make_batch([features], [instance.economics])
    with torch.no_grad():
        cache = policy.precompute(policy.encode(batch))
        seqs, logp = run_decoder(policy, cache, batch, mode, rng)
    sched = Schedule.from_seq(seqs[0], features.n_real, features.horizon, features.dup)
    cost = sequence_cost(sched, features, instance.economics).total
    return RolloutResult(sched, float(logp[0]), cost)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: the magic line ``attenmfg-ckpt/1\n``; one line of UTF-8 JSON with
# keys ``hyper`` (PolicyConfig fields), ``tensors`` (list of {name, shape} in
# payload order) and ``meta`` (free-form, e.g. training state); then every
# tensor as little-endian IEEE-754 float64 in C order, concatenated.


def encode_checkpoint(tensors: dict[str, np.ndarray], hyper: dict, meta: dict | None = None) -> bytes:
    header = {
        "hyper": hyper,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for a in tensors.values():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict, dict]:
    if not data.startswith(CKPT_MAGIC):
        raise ValueError("not an attenmfg checkpoint (bad magic)")
    end = data.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(data[len(CKPT_MAGIC):end])
    pos = end + 1
    tensors = {}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"checkpoint has {len(data) - pos} trailing bytes")
    return tensors, header["hyper"], header["meta"]


def policy_tensors(policy: AttenMfgPolicy) -> dict[str, np.ndarray]:
    return {n: p.detach().numpy().copy() for n, p in policy.named_parameters()}


def save_policy(policy: AttenMfgPolicy, meta: dict | None = None) -> bytes:
    return encode_checkpoint(policy_tensors(policy), asdict(policy.config), meta)


def load_policy(data: bytes) -> tuple[AttenMfgPolicy, dict]:
    tensors, hyper, meta = decode_checkpoint(data)
    policy = AttenMfgPolicy(PolicyConfig(**hyper))
    with torch.no_grad():
        for n, p in policy.named_parameters():
            if n not in tensors:
                raise ValueError(f"checkpoint lacks tensor {n!r}")
            if tuple(tensors[n].shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {n!r}")
            p.copy_(torch.from_numpy(tensors[n]))
    return policy, meta


def params_digest(policy: AttenMfgPolicy) -> str:
    h = hashlib.sha256()
    for _, a in policy_tensors(policy).items():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()

