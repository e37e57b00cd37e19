"""Pointwise layers, normalizations and parameter initialisation.

Feature maps are batched ``(B, N, C)`` tensors.  ``exact=True`` selects
evaluation paths whose per-row results do not depend on row position
(row-stable matmul, sorted reductions), which makes permuting the input rows
permute the output rows bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def linear(x, w, b=None, exact=False):
    """``x @ w + b`` over the last axis; ``w`` is (C_in, C_out)."""
    out = dm.matmul(x, w, row_stable=exact)
    return out if b is None else out + b


def context_norm(x, exact=False, eps=NORM_EPS):
    """Normalize each channel across the points of each item (no affine)."""
    mu = dm.mean(x, axis=1, keepdims=True, order_invariant=exact)
    v = dm.var(x, axis=1, keepdims=True, order_invariant=exact)
    return (x - mu) * dm.rsqrt(v + eps)


instance_norm = context_norm


def batch_norm(x, gamma, beta, state, key, train, exact=False, momentum=BN_MOMENTUM,
               eps=NORM_EPS):
    """Per-channel normalization across batch and points.

    Train mode normalizes with batch statistics and updates the running
    averages stored in ``state[key + ".mean"]`` / ``state[key + ".var"]``;
    eval mode uses the running averages.
    """
    mkey, vkey = key + ".mean", key + ".var"
    if train:
        mu = dm.mean(x, axis=(0, 1), keepdims=True, order_invariant=exact)
        v = dm.var(x, axis=(0, 1), keepdims=True, order_invariant=exact)
        if state is not None:
            count = x.shape[0] * x.shape[1]
            unbiased = v.value.reshape(-1) * (count / max(count - 1, 1))
            state[mkey] = ((1 - momentum) * state[mkey] + momentum * mu.value.reshape(-1)).astype(
                state[mkey].dtype)
            state[vkey] = ((1 - momentum) * state[vkey] + momentum * unbiased).astype(
                state[vkey].dtype)
        xhat = (x - mu) * dm.rsqrt(v + eps)
    else:
        mu = state[mkey].astype(x.dtype, copy=False)
        inv = (1.0 / np.sqrt(state[vkey] + eps)).astype(x.dtype, copy=False)
        xhat = (x - mu) * inv
    return xhat * gamma + beta


# ------------------------------------------------------------------ init

class ParamBuilder:
    """Collects named parameters and normalization state during init."""

    def __init__(self, rng, dtype=np.float64):
        self.rng = rng
        self.dtype = dtype
        self.params = {}
        self.state = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = np.asarray(value, dtype=self.dtype)
        return name

    def linear(self, name, fan_in, fan_out, bias=True):
        bound = 1.0 / np.sqrt(fan_in)
        self.add(name + ".w", self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        if bias:
            self.add(name + ".b", np.zeros(fan_out))

    def batch_norm(self, name, channels):
        self.add(name + ".gamma", np.ones(channels))
        self.add(name + ".beta", np.zeros(channels))
        self.state[name + ".mean"] = np.zeros(channels, dtype=self.dtype)
        self.state[name + ".var"] = np.ones(channels, dtype=self.dtype)


class Scope:
    """Prefixed view of a parameter dict (values may be Tensors or arrays)."""

    def __init__(self, params, prefix=""):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name):
        return self.params[self.prefix + name]

    def __contains__(self, name):
        return (self.prefix + name) in self.params

    def sub(self, name):
        return Scope(self.params, self.prefix + name + ".")

    def key(self, name):
        return self.prefix + name
