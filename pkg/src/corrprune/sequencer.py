"""Learned causal ordering of correspondences.

A per-point scorer produces ``s_i`` in ``(eps, 1)``; Gumbel-perturbed log
scores define a full descending ranking and a softmax over the set.  The
features are permuted by the ranking and scaled by the straight-through
values ``R = 1 + (Y - detach(Y))``, which are exactly one in value while
carrying the softmax gradient back to the scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import nn
from .exceptions import ContractError, NumericError

SCORE_EPS = 1e-6
UNIFORM_CLAMP = 1e-9


def init_scorer(builder: nn.ParamBuilder, name, d):
    hidden = max(d // 2, 1)
    builder.linear(name + ".fc1", d, hidden)
    builder.batch_norm(name + ".bn", hidden)
    builder.linear(name + ".fc2", hidden, 1)


def score(params, features, state=None, train=False, exact=False, prefix="scorer"):
    """Per-point scores ``eps + (1 - 2 eps) sigmoid(z)``, shape (B, N).

    The network is fc(d -> d/2), context norm, batch norm, relu, fc(d/2 -> 1).
    Context and batch norm aggregate statistics across points, but each
    point's score depends on its own row through a fixed affine map of it.
    """
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    fv = features.value if isinstance(features, dm.Tensor) else np.asarray(features)
    if not np.all(np.isfinite(fv)):
        raise NumericError("non-finite feature passed to the scorer")
    h = nn.linear(features, p["fc1.w"], p["fc1.b"], exact=exact)
    h = nn.context_norm(h, exact=exact)
    h = nn.batch_norm(h, p["bn.gamma"], p["bn.beta"], state, p.key("bn"), train, exact=exact)
    h = dm.relu(h)
    z = nn.linear(h, p["fc2.w"], p["fc2.b"], exact=exact)
    z = dm.reshape(z, z.shape[:-1])
    return SCORE_EPS + (1.0 - 2.0 * SCORE_EPS) * dm.sigmoid(z)


def gumbel_noise(shape, rng):
    u = np.clip(rng.random(shape), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_perturb(S, tau=1.0, seed=None, noise_enabled=True, rng=None):
    """Soft values and perturbed logits.

    Returns ``(Y, logits)`` where ``logits = g + log s`` and
    ``Y = softmax(logits / tau)`` over the last axis.  ``g`` is zero when
    noise is disabled.
    """
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logs = dm.log(S)
    if noise_enabled:
        rng = rng if rng is not None else np.random.default_rng(seed)
        logits = logs + gumbel_noise(logs.shape, rng).astype(logs.dtype)
    else:
        logits = logs
    return dm.softmax(logits * (1.0 / tau), axis=-1), logits


def causal_order(logits):
    """Descending ranking along the last axis; ties keep ascending index."""
    v = logits.value if isinstance(logits, dm.Tensor) else np.asarray(logits)
    return np.argsort(-v, axis=-1, kind="stable")


def _check_permutation(order, n):
    order = np.asarray(order)
    if order.shape[-1] != n or not np.array_equal(np.sort(order, axis=-1),
                                                  np.broadcast_to(np.arange(n), order.shape)):
        raise ContractError("order must be a permutation of 0..N-1 per item")
    return order


def _batched(x, order):
    x = dm._wrap(x)
    squeeze = x.ndim == 2 and np.asarray(order).ndim == 1
    if squeeze:
        x = dm.reshape(x, (1,) + x.shape)
        order = np.asarray(order)[None]
    return x, np.asarray(order), squeeze


def straight_through_values(Y, order):
    """``R = 1 + (Y_sorted - detach(Y_sorted))``: value exactly 1, gradient of Y."""
    Ys = dm.gather(Y, order, axis=1)
    return 1.0 + (Ys - dm.detach(Ys))


def straight_through_sort(features, Y, order):
    """Rows of ``features`` in ``order``, each scaled by its R value.

    features (B, N, d) or (N, d); Y (B, N) or (N,); order matching.
    """
    F, order, squeeze = _batched(features, order)
    if squeeze:
        Y = dm.reshape(dm._wrap(Y), (1, -1))
    order = _check_permutation(order, F.shape[1])
    R = straight_through_values(Y, order)
    out = dm.gather(F, order, axis=1) * dm.reshape(R, R.shape + (1,))
    return dm.reshape(out, out.shape[1:]) if squeeze else out


def restore_order(features, order):
    """Inverse permutation: row m of ``features`` goes back to ``order[m]``."""
    F, order, squeeze = _batched(features, order)
    order = _check_permutation(order, F.shape[1])
    out = dm.scatter(F, order, F.shape[1])
    return dm.reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class CausalOrder:
    index: np.ndarray
    soft: object
    straight_through: object
    scores: object
    logits: object


def causal_sequence(params, features, tau=1.0, noise_enabled=False, rng=None, state=None,
                    train=False, exact=False, anchor=None, prefix="scorer"):
    """Score, perturb, rank and sort a batch of feature maps.

    ``anchor = (order, Y0)`` replaces the ranking by ``order`` and the
    detached soft values by the constant array ``Y0``.  At the point where
    the anchor was recorded this changes nothing; elsewhere it gives the
    smooth surrogate whose finite differences match the straight-through
    gradient.  Returns ``(F_sorted, CausalOrder)``.
    """
    S = score(params, features, state=state, train=train, exact=exact, prefix=prefix)
    Y, logits = gumbel_perturb(S, tau, noise_enabled=noise_enabled, rng=rng)
    if anchor is None:
        order = causal_order(logits)
        R = straight_through_values(Y, order)
    else:
        order, Y0 = anchor
        order = _check_permutation(order, S.shape[-1])
        Ys = dm.gather(Y, order, axis=1)
        R = 1.0 + (Ys - np.take_along_axis(np.asarray(Y0), order, axis=1))
    F_sorted = dm.gather(features, order, axis=1) * dm.reshape(R, R.shape + (1,))
    return F_sorted, CausalOrder(order, Y, R, S, logits)
