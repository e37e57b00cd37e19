"""Local graph pattern learning on a dynamic k-nearest-neighbour graph."""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from . import nn
from ._kernels import candidate_distances, smallest_k
from .exceptions import ConfigError, ContractError


def _knn_batch(F, k, screen_dtype=np.float64):
    nb, n, _ = F.shape
    sq = np.einsum("bnd,bnd->bn", F, F)
    Fs = F.astype(screen_dtype, copy=False)
    # ranking key per row: |f_j|^2 - 2 f_i.f_j (the |f_i|^2 term is common)
    approx = Fs @ np.swapaxes(Fs, 1, 2)
    approx *= -2.0
    approx += sq[:, None, :].astype(screen_dtype)
    kc = min(n, 2 * k)
    if kc < n:
        cand, floor = smallest_k(approx.reshape(nb * n, n), kc)
        cand = cand.reshape(nb, n, kc)
        floor = floor.reshape(nb, n) + sq
    else:
        cand = np.broadcast_to(np.arange(n), (nb, n, n))
        floor = np.full((nb, n), np.inf)
    exact = candidate_distances(F, np.ascontiguousarray(cand))
    keys = np.lexsort((cand, exact), axis=-1)
    cand = np.take_along_axis(cand, keys, axis=-1)
    exact = np.take_along_axis(exact, keys, axis=-1)
    # rounding in the expanded form can hide a true neighbour outside the candidate set
    tol = 64 * np.finfo(screen_dtype).eps * (sq + sq.max(axis=1, keepdims=True)) + 1e-300
    unsure = exact[..., k - 1] + tol >= floor - tol
    out = cand[..., :k].copy()
    for b, i in zip(*np.nonzero(unsure)):
        diff = F[b] - F[b, i]
        d = np.einsum("nd,nd->n", diff, diff)
        out[b, i] = np.lexsort((np.arange(n), d))[:k]
    return out


def knn_indices(features, k):
    """Exact k nearest neighbours by squared Euclidean distance.

    features (N, d) or (B, N, d); returns int indices (…, N, k), 0-based,
    sorted by ascending distance with ties broken by ascending index.  A row
    is at distance 0 from itself, so it is its own first neighbour unless an
    identical row with a lower index exists.
    """
    F = features.value if isinstance(features, dm.Tensor) else np.asarray(features)
    n = F.shape[-2]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    # single-precision inputs are screened in single precision; the final
    # ranking always uses exact double-precision distances
    screen = np.float32 if F.dtype == np.float32 else np.float64
    F = F.astype(np.float64, copy=False)
    if F.ndim == 2:
        return _knn_batch(F[None], k, screen)[0]
    return _knn_batch(F, k, screen)


def build_edges(features, graph):
    """Edge block ``[f_i || f_i - f_ij]`` of shape (B, N, k, 2d)."""
    F = dm._wrap(features)
    graph = np.asarray(graph)
    squeeze = F.ndim == 2
    if squeeze:
        F = dm.reshape(F, (1,) + F.shape)
        graph = graph[None]
    nb, n, d = F.shape
    k = graph.shape[-1]
    if graph.shape != (nb, n, k) or graph.min() < 0 or graph.max() >= n:
        raise ContractError("graph does not match the feature map")
    nbrs = dm.reshape(dm.gather(F, graph.reshape(nb, n * k), axis=1), (nb, n, k, d))
    anchor = dm.reshape(F, (nb, n, 1, d))
    anchor_rep = anchor + np.zeros((1, 1, k, 1), dtype=F.dtype)
    edges = dm.concat([anchor_rep, anchor - nbrs], axis=-1)
    return dm.reshape(edges, edges.shape[1:]) if squeeze else edges


def init_ggc(builder: nn.ParamBuilder, name, d, k, groups):
    if groups < 1 or k % groups:
        raise ConfigError(f"groups={groups} must divide k={k}", key="groups")
    m = k // groups
    s1 = 1.0 / np.sqrt(2 * d * m)
    s2 = 1.0 / np.sqrt(d * groups)
    builder.add(name + ".w1", builder.rng.uniform(-s1, s1, size=(d, 2 * d, m)))
    builder.add(name + ".b1", np.zeros(d))
    builder.add(name + ".w2", builder.rng.uniform(-s2, s2, size=(d, d, groups)))
    builder.add(name + ".b2", np.zeros(d))


def group_graph_conv(edges, params, groups, prefix="ggc"):
    """Two-stage grouped aggregation of the k distance-sorted edges.

    Stage 1 convolves each contiguous block of k/groups edges (kernel
    k/groups, stride k/groups) from 2d to d channels; relu; stage 2 convolves
    across the ``groups`` block outputs (kernel groups) to one d-vector per
    anchor.  edges (B, N, k, 2d) -> (B, N, d).
    """
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    E = dm._wrap(edges)
    nb, n, k, c2 = E.shape
    if groups < 1 or k % groups:
        raise ConfigError(f"groups={groups} must divide k={k}", key="groups")
    m = k // groups
    d = p["w1"].shape[0]
    seq = dm.reshape(E, (nb * n, k, c2))
    h = dm.grouped_conv1d(seq, p["w1"], groups=1, stride=m) + p["b1"]
    h = dm.relu(h)
    out = dm.grouped_conv1d(h, p["w2"], groups=1, stride=groups) + p["b2"]
    return dm.reshape(out, (nb, n, d))


def init_lgpl(builder, name, d, k, groups):
    init_ggc(builder, name + ".ggc", d, k, groups)
    builder.batch_norm(name + ".bn", d)


def local_context_norm(x, params, state=None, train=False, exact=False, prefix="lgpl"):
    """``silu(BN(IN(x)))`` with IN across the points of each item."""
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    h = nn.instance_norm(x, exact=exact)
    h = nn.batch_norm(h, p["bn.gamma"], p["bn.beta"], state, p.key("bn"), train, exact=exact)
    return dm.silu(h)


def lgpl(features, params, k, groups, state=None, train=False, exact=False, knn_source=None,
         prefix="lgpl"):
    """kNN graph, edges, grouped graph convolution and local context norm.

    ``knn_source`` overrides the array the neighbourhoods are computed on
    (e.g. coordinates when ``knn_space = coords``).
    """
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    graph = knn_indices(features if knn_source is None else knn_source, k)
    edges = build_edges(features, graph)
    h = group_graph_conv(edges, p.sub("ggc"), groups)
    return local_context_norm(h, p, state=state, train=train, exact=exact)
