"""Minimal reverse-mode differentiation over dense numpy arrays.

Every differentiable computation in the package is composed from the closed
set returned by :func:`primitive_set`.  A :class:`Tensor` records the node
that produced it; node ids increase strictly in creation order, so visiting
nodes by decreasing id is a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _kernels
from .exceptions import ContractError, DegenerateGeometryWarning, NumericError

__all__ = [
    "Tensor", "primitive_set", "value_and_grad", "grad", "finite_diff_check",
    "GradReport", "GradEntry",
    "add", "sub", "mul", "div", "neg", "exp", "log", "rsqrt", "matmul",
    "softmax", "sigmoid", "silu", "tanh", "relu", "softplus", "sum", "mean",
    "var", "concat", "gather", "scatter", "reshape", "transpose", "detach",
    "grouped_conv1d", "sym_smallest_eigenpair", "selective_scan",
]

_PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "rsqrt",
    "matmul", "softmax", "sigmoid", "silu", "tanh", "relu", "softplus",
    "sum", "mean", "var", "concat", "gather", "scatter", "reshape",
    "transpose", "detach", "grouped-conv-1d",
    "symmetric-smallest-eigenpair", "selective-scan",
)

EIGEN_GAP_TOL = 1e-8

_ids = itertools.count()


def primitive_set():
    """Names of all differentiable primitives, in a fixed order."""
    return list(_PRIMITIVES)


class Tensor:
    """An array value plus the tape node that produced it."""

    __slots__ = ("value", "op", "parents", "vjp", "id", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, *, op="leaf", parents=(), vjp=None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _node(value, op, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, op=op, parents=tuple(parents), vjp=vjp)
    return Tensor(value, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, a.value)
    b = _wrap(b)
    return _wrap(a, b.value), b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _node(a.value + b.value, "add", (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _node(a.value - b.value, "sub", (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b.value, a.shape) if needs[0] else None,
                _unbroadcast(g * a.value, b.shape) if needs[1] else None)

    return _node(a.value * b.value, "mul", (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    out = a.value / b.value

    def vjp(g, needs):
        return (_unbroadcast(g / b.value, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.value, b.shape) if needs[1] else None)

    return _node(out, "div", (a, b), vjp)


def neg(x):
    x = _wrap(x)
    return _node(-x.value, "neg", (x,), lambda g, needs: (-g,))


def exp(x):
    x = _wrap(x)
    out = np.exp(x.value)
    return _node(out, "exp", (x,), lambda g, needs: (g * out,))


def log(x):
    x = _wrap(x)
    return _node(np.log(x.value), "log", (x,), lambda g, needs: (g / x.value,))


def rsqrt(x):
    x = _wrap(x)
    out = 1.0 / np.sqrt(x.value)
    return _node(out, "rsqrt", (x,), lambda g, needs: (-0.5 * g * out ** 3,))


def _sigmoid(v):
    return expit(v)


def sigmoid(x):
    x = _wrap(x)
    out = _sigmoid(x.value)
    return _node(out, "sigmoid", (x,), lambda g, needs: (g * out * (1.0 - out),))


def tanh(x):
    x = _wrap(x)
    out = np.tanh(x.value)
    return _node(out, "tanh", (x,), lambda g, needs: (g * (1.0 - out * out),))


def relu(x):
    x = _wrap(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0).astype(x.dtype, copy=False), "relu", (x,),
                 lambda g, needs: (g * mask,))


def silu(x):
    x = _wrap(x)
    sig = _sigmoid(x.value)
    out = x.value * sig
    return _node(out, "silu", (x,),
                 lambda g, needs: (g * (sig + x.value * sig * (1.0 - sig)),))


def softplus(x):
    x = _wrap(x)
    out = np.logaddexp(0.0, x.value).astype(x.dtype, copy=False)
    return _node(out, "softplus", (x,), lambda g, needs: (g * _sigmoid(x.value),))


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, axes, shape):
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _ordered_sum(v, axes):
    # summation in sorted order makes the result independent of element order
    for a in axes:
        v = np.sort(v, axis=a)
    return v.sum(axis=axes, keepdims=True)


def sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g, needs):
        if not keepdims:
            g = _expand(g, axes, x.shape)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, "sum", (x,), vjp)


def mean(x, axis=None, keepdims=False, order_invariant=False):
    """Mean along ``axis``; ``order_invariant`` sums in sorted order."""
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    if order_invariant:
        out = _ordered_sum(x.value, axes) / n
    else:
        out = x.value.sum(axis=axes, keepdims=True) / n
    if not keepdims:
        out = out.squeeze(axis=axes)

    def vjp(g, needs):
        if not keepdims:
            g = _expand(g, axes, x.shape)
        return (np.broadcast_to(g / n, x.shape),)

    return _node(out, "mean", (x,), vjp)


def var(x, axis=None, keepdims=False, order_invariant=False):
    """Population variance (ddof=0) along ``axis``."""
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    summer = _ordered_sum if order_invariant else (lambda v, ax: v.sum(axis=ax, keepdims=True))
    centered = x.value - summer(x.value, axes) / n
    out = summer(centered * centered, axes) / n
    if not keepdims:
        out = out.squeeze(axis=axes)

    def vjp(g, needs):
        if not keepdims:
            g = _expand(g, axes, x.shape)
        return (g * (2.0 / n) * centered,)

    return _node(out, "var", (x,), vjp)


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (x,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b, row_stable=False):
    """Matrix product ``a @ b``.

    ``row_stable`` evaluates a 2-D right operand without BLAS so that each
    output row depends only on the matching input row (bit-exact under row
    permutations).
    """
    a, b = _pair(a, b)
    if row_stable and b.ndim == 2:
        out = np.einsum("...k,kn->...n", a.value, b.value, optimize=False)
    else:
        out = a.value @ b.value

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if needs[1]:
            if b.ndim == 2:
                av = a.value.reshape(-1, a.shape[-1])
                gb = av.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, "matmul", (a, b), vjp)


def sym_smallest_eigenpair(m, gap_tol=EIGEN_GAP_TOL):
    """Smallest eigenpair of the symmetric part of a (batched) square matrix.

    Returns ``(vector, value)``.  The eigenvector is unit length with its
    largest-magnitude component positive.  Where the gap to the next
    eigenvalue is below ``gap_tol`` the eigenvector derivative is zeroed and
    a :class:`DegenerateGeometryWarning` is issued.
    """
    m = _wrap(m)
    sym = 0.5 * (m.value + np.swapaxes(m.value, -1, -2))
    lam, vecs = np.linalg.eigh(sym)
    v0 = vecs[..., :, 0]
    pivot = np.take_along_axis(v0, np.abs(v0).argmax(axis=-1)[..., None], axis=-1)
    sign = np.where(pivot < 0, -1.0, 1.0)
    v0 = v0 * sign
    vecs = vecs.copy()
    vecs[..., :, 0] = v0
    gap = lam[..., 1] - lam[..., 0]
    degenerate = gap < gap_tol
    if np.any(degenerate):
        warnings.warn(
            f"eigenvalue gap below {gap_tol:g} in {int(np.sum(degenerate))} matrix(es); "
            "eigenvector gradient zeroed", DegenerateGeometryWarning, stacklevel=2)

    def vec_vjp(g, needs):
        proj = np.einsum("...ij,...i->...j", vecs, g)
        denom = lam[..., :1] - lam
        denom[..., 0] = 1.0
        coef = proj / np.where(np.abs(denom) < 1e-300, 1e-300, denom)
        coef[..., 0] = 0.0
        gm = (vecs @ coef[..., :, None]) * v0[..., None, :]
        gm = np.where(degenerate[..., None, None], 0.0, gm)
        return (0.5 * (gm + np.swapaxes(gm, -1, -2)),)

    def val_vjp(g, needs):
        return (g[..., None, None] * v0[..., :, None] * v0[..., None, :],)

    vec = _node(v0, "symmetric-smallest-eigenpair", (m,), vec_vjp)
    val = _node(lam[..., 0].copy(), "symmetric-smallest-eigenpair", (m,), val_vjp)
    return vec, val


# ----------------------------------------------------------------- structural

def concat(xs, axis=-1):
    xs = [_wrap(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, "concat", tuple(xs), vjp)


def _scatter_add_rows(g, flat, nrows):
    feat = np.ascontiguousarray(g).reshape(len(flat), -1)
    return _kernels.scatter_add_rows(feat, flat.astype(np.int64, copy=False), nrows)


def gather(x, index, axis=1):
    """Select entries along ``axis``.

    A 1-D ``index`` picks the same positions for every leading slice
    (``np.take``).  A 2-D ``index`` of shape ``(B, M)`` with ``axis=1`` picks
    per batch item: ``out[b, m] = x[b, index[b, m]]``.
    """
    x = _wrap(x)
    index = np.asarray(index)
    if index.ndim == 1:
        out = np.take(x.value, index, axis=axis)

        def vjp(g, needs):
            gx = np.zeros_like(x.value)
            ax = axis % x.ndim
            moved = np.moveaxis(gx, ax, 0)
            np.add.at(moved, index, np.moveaxis(g, ax, 0))
            return (gx,)

        return _node(out, "gather", (x,), vjp)

    if axis != 1 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ContractError("batched gather expects index (B, M) along axis 1")
    nb, n = x.shape[:2]
    rows = np.arange(nb)[:, None]
    out = x.value[rows, index]

    def vjp(g, needs):
        flat = (rows * n + index).ravel()
        gx = _scatter_add_rows(g, flat, nb * n)
        return (gx.reshape(x.shape),)

    return _node(out, "gather", (x,), vjp)


def scatter(x, index, size):
    """Inverse of a batched gather with unique indices.

    ``out[b, index[b, m]] = x[b, m]`` with output length ``size`` along axis 1;
    unaddressed rows are zero.
    """
    x = _wrap(x)
    index = np.asarray(index)
    nb = x.shape[0]
    if index.shape != x.shape[:2]:
        raise ContractError("scatter index must match the first two axes of x")
    srt = np.sort(index, axis=1)
    if index.size and (srt.min() < 0 or srt.max() >= size or np.any(srt[:, 1:] == srt[:, :-1])):
        raise ContractError("scatter index must hold unique positions in range")
    rows = np.arange(nb)[:, None]
    out = np.zeros((nb, size) + x.shape[2:], dtype=x.dtype)
    out[rows, index] = x.value

    def vjp(g, needs):
        return (g[rows, index],)

    return _node(out, "scatter", (x,), vjp)


def reshape(x, shape):
    x = _wrap(x)
    return _node(x.value.reshape(shape), "reshape", (x,),
                 lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.value, axes), "transpose", (x,),
                 lambda g, needs: (np.transpose(g, inv),))


def detach(x):
    """Same value, no gradient path."""
    x = _wrap(x)
    return Tensor(x.value, op="detach")


# ---------------------------------------------------------------- convolution

def grouped_conv1d(x, w, groups=1, stride=1, pad_left=0):
    """Grouped 1-D convolution over channel-last input.

    x: (B, L, C_in); w: (C_out, C_in // groups, K).  The sequence is
    zero-padded on the left by ``pad_left`` (causal when ``pad_left = K-1``).
    Returns (B, L_out, C_out) with ``L_out = (L + pad_left - K) // stride + 1``.
    """
    x = _wrap(x)
    w = _wrap(w, x.value)
    nb, length, cin = x.shape
    cout, cg, k = w.shape
    if cin % groups or cout % groups or cin // groups != cg:
        raise ContractError(f"channel counts {cin}->{cout} incompatible with groups={groups}")
    og = cout // groups
    xp = np.pad(x.value, ((0, 0), (pad_left, 0), (0, 0))) if pad_left else x.value
    lout = (length + pad_left - k) // stride + 1
    if lout < 1:
        raise ContractError("convolution kernel longer than padded input")
    span = stride * (lout - 1) + 1
    wv = w.value

    if cg == 1 and og == 1:
        # depthwise: a sum of k shifted, channel-scaled copies
        taps = [xp[:, j:j + span:stride, :] for j in range(k)]
        out = taps[0] * wv[:, 0, 0]
        for j in range(1, k):
            out = out + taps[j] * wv[:, 0, j]

        def vjp(g, needs):
            gx = gw = None
            if needs[1]:
                gw = np.stack([np.einsum("blc,blc->c", g, taps[j]) for j in range(k)],
                              axis=-1)[:, None, :]
            if needs[0]:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, j:j + span:stride, :] += g * wv[:, 0, j]
                gx = gxp[:, pad_left:]
            return gx, gw

        return _node(out, "grouped-conv-1d", (x, w), vjp)

    if groups == 1 and stride == k and not pad_left and length == lout * k:
        # non-overlapping windows are a plain reshape of the input
        rows = x.value.reshape(nb * lout, k * cin)
        w2 = np.ascontiguousarray(wv.transpose(0, 2, 1)).reshape(cout, k * cin)
        out = (rows @ w2.T).reshape(nb, lout, cout)

        def vjp(g, needs):
            g2 = g.reshape(nb * lout, cout)
            gx = gw = None
            if needs[1]:
                gw = (g2.T @ rows).reshape(cout, k, cin).transpose(0, 2, 1)
            if needs[0]:
                gx = (g2 @ w2).reshape(x.shape)
            return gx, gw

        return _node(out, "grouped-conv-1d", (x, w), vjp)

    win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :lout]
    if groups == 1:
        # one dense product over (channel, tap) windows
        rows = np.ascontiguousarray(win).reshape(nb * lout, cin * k)
        w2 = wv.reshape(cout, cin * k)
        out = (rows @ w2.T).reshape(nb, lout, cout)

        def vjp(g, needs):
            g2 = g.reshape(nb * lout, cout)
            gx = gw = None
            if needs[1]:
                gw = (g2.T @ rows).reshape(w.shape)
            if needs[0]:
                gwin = (g2 @ w2).reshape(nb, lout, cin, k)
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, j:j + span:stride, :] += gwin[..., j]
                gx = gxp[:, pad_left:]
            return gx, gw

        return _node(out, "grouped-conv-1d", (x, w), vjp)

    win = win.reshape(nb, lout, groups, cg, k)
    wr = wv.reshape(groups, og, cg, k)
    out = np.einsum("blgck,gock->blgo", win, wr, optimize=True).reshape(nb, lout, cout)

    def vjp(g, needs):
        gr = g.reshape(nb, lout, groups, og)
        gx = gw = None
        if needs[1]:
            gw = np.einsum("blgck,blgo->gock", win, gr, optimize=True).reshape(w.shape)
        if needs[0]:
            gwin = np.einsum("blgo,gock->blgck", gr, wr, optimize=True).reshape(nb, lout, cin, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:stride, :] += gwin[..., j]
            gx = gxp[:, pad_left:]
        return gx, gw

    return _node(out, "grouped-conv-1d", (x, w), vjp)


# ---------------------------------------------------------------- state space

def selective_scan(x, delta, A, B, C, D, input_rule="euler"):
    """Diagonal selective state-space scan with input-dependent B, C, step.

    Shapes: x, delta (Bt, L, Ch); A (Ch, S) negative; B, C (Bt, L, S);
    D (Ch,).  Per channel and state, ``h_t = exp(delta_t A) h_{t-1} +
    Bbar_t x_t`` and ``y_t = C_t . h_t + D x_t`` with ``h_0 = 0``.
    ``input_rule`` selects ``Bbar = delta B`` ("euler") or the exact
    zero-order-hold integral ``(exp(delta A) - 1) / A * B`` ("zoh").
    """
    if input_rule not in ("euler", "zoh"):
        raise ContractError(f"unknown input_rule {input_rule!r}")
    x = _wrap(x)
    args = [x] + [_wrap(t, x.value) for t in (delta, A, B, C, D)]
    vals = [np.ascontiguousarray(t.value, dtype=x.dtype) for t in args]
    xv, dv, Av, Bv, Cv, Dv = vals
    zoh = input_rule == "zoh"
    dA = dv[..., None] * Av
    decay = np.exp(dA)
    bfac = np.expm1(dA) / Av if zoh else decay[:1, :1, :1, :1]
    out = _kernels.scan_forward(xv, dv, decay, bfac, Bv, Cv, Dv, zoh)

    def vjp(g, needs):
        return _kernels.scan_backward(xv, dv, Av, decay, bfac, Bv, Cv, Dv,
                                      np.ascontiguousarray(g, dtype=x.dtype), zoh)

    return _node(out, "selective-scan", tuple(args), vjp)


# ------------------------------------------------------------------ autodiff

def _reachable(output):
    seen = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def _first_nonfinite(nodes):
    for node in sorted(nodes, key=lambda t: t.id):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def grad(output, wrt, check_finite=True):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if not isinstance(output, Tensor) or output.value.size != 1:
        raise ContractError("gradient requested of a non-scalar output")
    nodes = _reachable(output)
    keep = {t.id for t in wrt}
    grads = {output.id: np.ones_like(output.value)}
    for node in nodes:
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        if node.id not in keep:
            del grads[node.id]
        needs = tuple(p.requires_grad for p in node.parents)
        pgrads = node.vjp(g, needs)
        for parent, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            # keep each gradient in its node's precision (mixed matmuls are slow)
            pg = np.asarray(pg)
            if pg.dtype != parent.value.dtype:
                pg = pg.astype(parent.value.dtype)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    out = []
    for t in wrt:
        g = grads.get(t.id)
        out.append(np.zeros_like(t.value) if g is None else np.array(g, dtype=t.dtype).reshape(t.shape))
    if check_finite:
        if not np.all(np.isfinite(output.value)):
            bad = _first_nonfinite(nodes) or output
            raise NumericError(f"non-finite value at node {bad.id} ({bad.op})", node=bad)
        if not all(np.all(np.isfinite(g)) for g in out):
            bad = _first_nonfinite(nodes)
            where = f" at node {bad.id} ({bad.op})" if bad is not None else ""
            raise NumericError(f"non-finite gradient{where}", node=bad)
    return out


def value_and_grad(f, inputs):
    """Evaluate scalar ``f`` and its gradient with respect to ``inputs``.

    ``inputs`` is a sequence of arrays (``f`` is called positionally and a list
    of gradients is returned) or a dict (``f`` receives a dict of tensors and a
    dict of gradients is returned).
    """
    if isinstance(inputs, dict):
        leaves = {k: Tensor(np.array(v, copy=True), True) for k, v in inputs.items()}
        out = f(leaves)
        order = list(leaves)
        tensors = [leaves[k] for k in order]
    else:
        tensors = [Tensor(np.array(v, copy=True), True) for v in inputs]
        out = f(*tensors)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if out.value.size != 1:
        raise ContractError(f"value_and_grad needs a scalar output, got shape {out.shape}")
    grads = grad(out, tensors)
    value = float(out.value.reshape(()))
    if isinstance(inputs, dict):
        return value, dict(zip(order, grads))
    return value, grads


# ------------------------------------------------------------- gradient audit

@dataclass
class GradEntry:
    name: str
    index: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kinks: np.ndarray
    max_abs: float
    max_rel: float
    passed: bool


@dataclass
class GradReport:
    entries: list = field(default_factory=list)
    rtol: float = 1e-4
    atol: float = 1e-6

    @property
    def max_abs(self):
        return max((e.max_abs for e in self.entries), default=0.0)

    @property
    def max_rel(self):
        return max((e.max_rel for e in self.entries), default=0.0)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def flagged(self):
        return [e.name for e in self.entries if e.kinks.any()]

    def failures(self):
        return [e for e in self.entries if not e.passed]

    def table(self):
        lines = ["name\tcoords\tmax_abs\tmax_rel\tkinks\tstatus"]
        for e in self.entries:
            lines.append(f"{e.name}\t{e.index.size}\t{e.max_abs:.3e}\t{e.max_rel:.3e}\t"
                         f"{int(e.kinks.sum())}\t{'ok' if e.passed else 'FAIL'}")
        return "\n".join(lines)


def _scalar(f, args):
    out = f(*args)
    value = out.value if isinstance(out, Tensor) else np.asarray(out)
    return float(np.asarray(value, dtype=np.float64).reshape(()))


def finite_diff_check(f, inputs, h=1e-6, rtol=1e-4, atol=1e-6, max_coords=None, seed=0,
                      names=None):
    """Compare analytic gradients against central finite differences.

    ``inputs`` is a sequence or dict of float64 arrays.  ``max_coords`` caps
    the probed coordinates per input (seeded random subset).  A coordinate
    whose one-sided differences disagree is reported as a kink and counts as a
    failure.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    as_dict = isinstance(inputs, dict)
    keys = list(inputs) if as_dict else list(range(len(inputs)))
    arrays = [np.array(inputs[k], copy=True) for k in keys]
    if any(a.dtype != np.float64 for a in arrays):
        raise ContractError("finite_diff_check requires float64 inputs")
    if names is None:
        names = [str(k) for k in keys]

    if as_dict:
        def call(*vals):
            return f(dict(zip(keys, vals)))
    else:
        call = f

    _, analytic = value_and_grad(call, arrays)
    f0 = _scalar(call, [Tensor(a) for a in arrays])
    if not np.isfinite(f0):
        raise NumericError("function is non-finite at the base point")
    rng = np.random.default_rng(seed)
    report = GradReport(rtol=rtol, atol=atol)
    for pos, (name, arr, ga) in enumerate(zip(names, arrays, analytic)):
        size = arr.size
        if max_coords is not None and size > max_coords:
            index = np.sort(rng.choice(size, max_coords, replace=False))
        else:
            index = np.arange(size)
        num = np.empty(index.size)
        kinks = np.zeros(index.size, dtype=bool)
        spread = np.zeros(index.size)
        flat = arr.reshape(-1)
        for j, i in enumerate(index):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(call, [Tensor(a) for a in arrays])
            flat[i] = orig - h
            fm = _scalar(call, [Tensor(a) for a in arrays])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite probe for {name}[{i}]")
            num[j] = (fp - fm) / (2 * h)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            spread[j] = abs(fwd - bwd)
            kinks[j] = spread[j] > 1e-2 * max(1.0, abs(fwd), abs(bwd))
        an = ga.reshape(-1)[index].astype(np.float64)
        dev = np.abs(an - num)
        dev = np.where(kinks, np.maximum(dev, spread / 2), dev)
        max_dev = float(dev.max(initial=0.0))
        scale = max(np.max(np.abs(num), initial=0.0), np.max(np.abs(an), initial=0.0))
        ok = bool(np.all(dev <= atol + rtol * np.abs(num)) and not kinks.any())
        report.entries.append(GradEntry(
            name=name, index=index, analytic=an, numeric=num, kinks=kinks,
            max_abs=max_dev, max_rel=max_dev / scale if scale > 0 else 0.0, passed=ok))
    return report
