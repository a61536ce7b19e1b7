"""Sparsely-gated mixture-of-experts feed-forward layer.

Routing per token::

    logits = x @ theta + bias (+ gaussian noise while training, if enabled)
    probs  = softmax(top_k(logits, k))       # non-top-k entries set to -inf first
    out    = sum_i probs_i * expert_i(x)     # only the k selected experts run

With ``k = 1`` every probability row is exactly one-hot, so each token's output
is exactly one expert's FFN output. Note that in that case the task loss sends
no gradient to the router (d softmax / d logit vanishes on a single finite
entry); the router is shaped by the z-loss, which sees the pre-mask logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import (
    FeedForward,
    Module,
    ShapeError,
    Tensor,
    concat,
    gather_rows,
    logsumexp,
    masked_fill,
    matmul,
    parameter,
    scatter_add_rows,
    softmax,
)


class GatingNetwork(Module):
    def __init__(self, d_model, num_experts, rng, noise_enabled=False, noise_scale=1.0):
        bound = 1.0 / math.sqrt(d_model)
        self.theta = parameter(rng.uniform(-bound, bound, size=(d_model, num_experts)))
        self.bias = parameter(np.zeros(num_experts))
        self._noise_enabled = bool(noise_enabled)
        self._noise_scale = float(noise_scale)
        if self._noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    @property
    def noise_enabled(self):
        return self._noise_enabled

    @property
    def noise_scale(self):
        return self._noise_scale

    @property
    def num_experts(self):
        return self.theta.shape[1]

    @staticmethod
    def count(d_model, num_experts):
        return d_model * num_experts + num_experts


class MoELayer(Module):
    def __init__(self, d_model, d_ff, num_experts, rng, k=1, noise_enabled=False, noise_scale=1.0):
        if num_experts < 1:
            raise ValueError("need at least one expert")
        if not 1 <= k <= num_experts:
            raise ValueError(f"k={k} outside [1, {num_experts}]")
        self.gate = GatingNetwork(d_model, num_experts, rng, noise_enabled, noise_scale)
        self.experts = [FeedForward(d_model, d_ff, rng) for _ in range(num_experts)]
        self._k = int(k)
        self._d_model = d_model
        self._d_ff = d_ff

    @property
    def k(self):
        return self._k

    @property
    def num_experts(self):
        return len(self.experts)

    def __call__(self, tokens, rng=None, training=None):
        training = self.training if training is None else training
        return moe_forward(tokens, self, rng, training)

    @staticmethod
    def count(d_model, d_ff, num_experts):
        return num_experts * FeedForward.count(d_model, d_ff) + GatingNetwork.count(d_model, num_experts)


@dataclass
class RoutingStats:
    """Per-expert routing fractions for one batch.

    ``q[i]`` is the fraction of tokens whose argmax expert is ``i``; ``p[i]`` is the
    mean gate probability on expert ``i``. ``counts`` and ``prob_sum`` are the raw
    accumulators so shards merge by addition. ``p_tensor`` (when present) is the
    differentiable mean probability used by the load-balancing loss.
    """

    counts: np.ndarray
    prob_sum: np.ndarray
    token_count: int
    p_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def q(self):
        return self.counts / self.token_count

    @property
    def p(self):
        return self.prob_sum / self.token_count

    @property
    def num_experts(self):
        return len(self.counts)

    @classmethod
    def from_fractions(cls, q, p, token_count):
        q = np.asarray(q, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        return cls(q * token_count, p * token_count, int(token_count))

    def merge(self, other):
        if self.num_experts != other.num_experts:
            raise ValueError("cannot merge stats over different expert counts")
        return RoutingStats(self.counts + other.counts, self.prob_sum + other.prob_sum, self.token_count + other.token_count)

    def to_record(self, step, layer_id, lb_loss=None, z_loss=None):
        return {
            "step": int(step),
            "layer_id": int(layer_id),
            "q": [float(v) for v in self.q],
            "p": [float(v) for v in self.p],
            "lb_loss": None if lb_loss is None else float(lb_loss),
            "z_loss": None if z_loss is None else float(z_loss),
        }


def routing_record_json(stats, step, layer_id, lb_loss=None, z_loss=None):
    """One JSON line describing a layer's routing at a step."""
    return json.dumps(stats.to_record(step, layer_id, lb_loss, z_loss), sort_keys=True)


@dataclass
class MoEOutput:
    output: Tensor
    logits: Tensor  # pre-noise router logits (z-loss input)
    routing_logits: np.ndarray  # logits that actually drove routing (noisy when enabled)
    probs: Tensor
    stats: RoutingStats


def gate_logits(tokens, gate, rng=None, training=False):
    """Router logits ``tokens @ theta + bias``; returns ``(clean, routed)``.

    ``routed`` adds N(0, noise_scale^2) per logit when noise is enabled and
    training, otherwise it is the same tensor as ``clean``.
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != gate.theta.shape[0]:
        raise ShapeError(f"gate expects (S, {gate.theta.shape[0]}) tokens, got {tokens.shape}")
    clean = matmul(tokens, gate.theta) + gate.bias
    if gate.noise_enabled and training and gate.noise_scale > 0:
        if rng is None:
            raise ValueError("gating noise needs an rng")
        return clean, clean + rng.normal(0.0, gate.noise_scale, size=clean.shape)
    return clean, clean


def top_k_mask(logits, k):
    """Keep the k largest entries per row (lowest index wins ties); others become -inf."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if k == n:
        return logits
    keep = top_k_indices(logits.data, k)
    mask = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(mask, keep, False, axis=-1)
    return masked_fill(logits, mask, -np.inf)


def top_k_indices(values, k):
    """Indices of the k largest entries per row, ordered by rank, lowest index on ties."""
    values = np.asarray(values, dtype=np.float64)
    if k == 1:
        choice, _, _ = kernels.top1_dispatch(values.reshape(-1, values.shape[-1]))
        return choice.reshape(values.shape[:-1] + (1,))
    # stable sort on the negated values keeps the lower index first among equals
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def gate_probs(masked_logits):
    """Softmax over Top-k masked logits; rows with no finite entry are an error."""
    return softmax(masked_logits, axis=-1)


def moe_forward(tokens, layer, rng=None, training=False):
    """Sparse evaluation of the MoE layer over ``(S, d)`` tokens.

    Tokens are grouped by selected expert, each expert runs once on its group,
    and weighted outputs are scattered back to token order.
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    clean, routed = gate_logits(tokens, layer.gate, rng, training)
    masked = top_k_mask(routed, layer.k)
    probs = gate_probs(masked)
    s = tokens.shape[0]
    n = layer.num_experts
    choice = top_k_indices(routed.data, layer.k)  # (S, k)
    out = Tensor(np.zeros_like(tokens.data))
    if layer.k == 1:
        _, order, counts = kernels.top1_dispatch(routed.data)
        flat_tok = order
        flat_exp = np.repeat(np.arange(n), counts)
    else:
        flat_tok = np.repeat(np.arange(s), layer.k)
        flat_exp = choice.reshape(-1)
        order = np.argsort(flat_exp, kind="stable")
        flat_tok, flat_exp = flat_tok[order], flat_exp[order]
        counts = np.bincount(flat_exp, minlength=n)
    start = 0
    pieces_idx = []
    pieces_val = []
    probs_flat = probs.reshape(s * n)
    for e in range(n):
        c = int(counts[e])
        if c == 0:
            continue
        idx = flat_tok[start : start + c]
        start += c
        y = layer.experts[e](gather_rows(tokens, idx))
        w = gather_rows(probs_flat.reshape(s * n, 1), idx * n + e)
        pieces_idx.append(idx)
        pieces_val.append(y * w)
    if pieces_val:
        out = scatter_add_rows(out, np.concatenate(pieces_idx), concat(pieces_val, axis=0))
    top1 = choice[:, 0]
    stats = RoutingStats(
        counts=np.bincount(top1, minlength=n).astype(np.float64),
        prob_sum=probs.data.sum(axis=0),
        token_count=s,
        p_tensor=probs.mean(axis=0),
    )
    return MoEOutput(out, clean, routed.data, probs, stats)


def load_balance_loss(stats):
    """``N * sum_i Q_i * P_i``; Q is a hard count (constant), gradient flows through P."""
    if stats.token_count <= 0:
        raise ValueError("load-balancing loss needs at least one token")
    n = stats.num_experts
    q = stats.q
    if stats.p_tensor is not None:
        return (stats.p_tensor * q).sum() * float(n)
    return Tensor(n * float((q * stats.p).sum()))


def router_z_loss(logits):
    """Mean over tokens of the squared log-sum-exp of router logits (shifted, stable)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("router z-loss needs a non-empty (S, N) logit matrix")
    lse = logsumexp(logits, axis=-1)
    return (lse * lse).mean()


@dataclass(frozen=True)
class FlopCount:
    expert_flops: int
    gating_flops: int

    @property
    def total(self):
        return self.expert_flops + self.gating_flops


def flops_per_token(layer=None, *, d_model=None, d_ff=None, num_experts=None, k=1):
    """Per-token FLOPs of an MoE layer, expert and router parts reported separately.

    Convention: one multiply-add = 2 FLOPs; bias additions and the GELU are not
    counted. Expert compute is ``k * 2 * (d*ff + ff*d)`` and does not depend on
    the number of experts; the router costs ``2 * d * N``.
    """
    if layer is not None:
        d_model, d_ff, num_experts, k = layer._d_model, layer._d_ff, layer.num_experts, layer.k
    expert = k * 2 * (d_model * d_ff + d_ff * d_model)
    gating = 2 * d_model * num_experts
    return FlopCount(int(expert), int(gating))
