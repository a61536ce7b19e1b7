"""Parameter containers and the standard layers every model here is built from."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Attribute-order parameter registry.

    Every ``Tensor`` attribute is a parameter (frozen ones have
    ``requires_grad=False``); sub-modules may be attributes or lists of modules. Naming is dotted and
    deterministic (attribute insertion order).
    """

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def train(self, mode=True):
        self._set_mode(mode)
        return self

    def eval(self):
        return self.train(False)

    def _set_mode(self, mode):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val._set_mode(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item._set_mode(mode)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)

    @staticmethod
    def count(d_in, d_out, bias=True):
        return d_in * d_out + (d_out if bias else 0)


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def __call__(self, x):
        return F.layer_norm(x, self.gain, self.bias)

    @staticmethod
    def count(d):
        return 2 * d


class FeedForward(Module):
    """linear -> GELU -> linear."""

    def __init__(self, d_model, d_ff, rng):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def __call__(self, x):
        return self.fc2(F.gelu(self.fc1(x)))

    @staticmethod
    def count(d_model, d_ff):
        return Linear.count(d_model, d_ff) + Linear.count(d_ff, d_model)


class MultiHeadAttention(Module):
    """Full (unmasked) self-attention over a ``(B, S, d)`` sequence."""

    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ValueError(f"model dim {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.proj = Linear(d_model, d_model, rng)

    def __call__(self, x):
        b, s, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, s, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = F.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = F.softmax(scores, axis=-1)
        out = F.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.proj(out)

    @staticmethod
    def count(d_model):
        return Linear.count(d_model, 3 * d_model) + Linear.count(d_model, d_model)
