"""Selective state-space filter: scan, gated block and channel-aware gate.

The scan runs along the point axis in the order fixed by the sequencer.
Sequences are batched ``(B, L, channels)``; ``A`` is stored as ``A_log``
with ``A = -exp(A_log)`` so every state decays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import nn
from .exceptions import ContractError, NumericError

INPUT_RULES = ("euler", "zoh")


@dataclass
class ScanInputs:
    """Plain-array scan operands (values only), shapes as in :func:`scan`."""

    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def discretize(A, B, delta, input_rule="euler"):
    """``Abar = exp(delta A)`` and the input matrix ``Bbar``.

    Shapes broadcast: A (..., Ch, S), delta (..., Ch, 1) or scalar, B (..., S).
    ``euler`` gives ``Bbar = delta B``; ``zoh`` the exact
    ``(exp(delta A) - 1) / A * B`` (which equals ``(dA)^-1 (exp(dA) - I) dB``
    for diagonal A).
    """
    if input_rule not in INPUT_RULES:
        raise ContractError(f"unknown input rule {input_rule!r}")
    A = np.asarray(A, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    dA = delta * A
    Abar = np.exp(dA)
    if input_rule == "euler":
        Bbar = delta * B
    else:
        Bbar = np.expm1(dA) / A * B
    return Abar, Bbar


def _decay_and_input(delta, A, B, x, input_rule):
    # (Bt, L, Ch, S) log-decay and driven input per channel and state
    dA = delta[..., None] * A
    if input_rule == "euler":
        u = (delta * x)[..., None] * B[:, :, None, :]
    else:
        u = (np.expm1(dA) / A) * (x[..., None] * B[:, :, None, :])
    return dA, u


def selective_scan_naive(x, delta, A, B, C, D, input_rule="euler"):
    """Reference recurrence, one timestep at a time (values only)."""
    x, delta, B, C = (np.asarray(v) for v in (x, delta, B, C))
    nb, length, ch = x.shape
    h = np.zeros((nb, ch, A.shape[1]), dtype=np.result_type(x, A))
    y = np.empty((nb, length, ch), dtype=h.dtype)
    for t in range(length):
        dA = delta[:, t, :, None] * A
        if input_rule == "euler":
            bx = (delta[:, t] * x[:, t])[..., None] * B[:, t, None, :]
        else:
            bx = np.expm1(dA) / A * (x[:, t, :, None] * B[:, t, None, :])
        h = np.exp(dA) * h + bx
        y[:, t] = np.einsum("bcs,bs->bc", h, C[:, t]) + D * x[:, t]
    return y


# beyond this much cumulative decay inside a block, exp(-c) risks overflow
_MAX_BLOCK_DECAY = 600.0


def selective_scan_blocked(x, delta, A, B, C, D, block_size=64, input_rule="euler"):
    """Chunked scan carrying the terminal state across blocks (values only).

    Inside a block with cumulative log-decay ``c_k``, the state is
    ``h_k = exp(c_k) (h_0 + sum_{j<=k} exp(-c_j) u_j)``, evaluated with
    vectorised cumulative sums.  Blocks whose total decay exceeds a safe
    range are processed step by step.
    """
    if block_size < 1:
        raise ContractError("block_size must be >= 1")
    x, delta, B, C = (np.asarray(v) for v in (x, delta, B, C))
    nb, length, ch = x.shape
    ns = A.shape[1]
    dtype = np.result_type(x, A)
    h = np.zeros((nb, ch, ns), dtype=dtype)
    y = np.empty((nb, length, ch), dtype=dtype)
    for start in range(0, length, block_size):
        stop = min(start + block_size, length)
        sl = slice(start, stop)
        dA, u = _decay_and_input(delta[:, sl], A, B[:, sl], x[:, sl], input_rule)
        c = np.cumsum(dA, axis=1)
        if stop - start == 1 or -c[:, -1].min() > _MAX_BLOCK_DECAY:
            hs = np.empty_like(u)
            for j in range(stop - start):
                h = np.exp(dA[:, j]) * h + u[:, j]
                hs[:, j] = h
        else:
            acc = np.cumsum(np.exp(-c) * u, axis=1)
            hs = np.exp(c) * (h[:, None] + acc)
            h = hs[:, -1]
        y[:, sl] = np.einsum("blcs,bls->blc", hs, C[:, sl]) + D * x[:, sl]
    return y


def random_scan_inputs(rng, nb, length, ch, ns, dtype=np.float64):
    """A well-conditioned random scan instance (values only)."""
    return ScanInputs(
        rng.normal(size=(nb, length, ch)).astype(dtype),
        rng.uniform(1e-3, 0.5, size=(nb, length, ch)).astype(dtype),
        -np.exp(rng.uniform(-1.0, 1.5, size=(ch, ns))).astype(dtype),
        rng.normal(size=(nb, length, ns)).astype(dtype),
        rng.normal(size=(nb, length, ns)).astype(dtype),
        rng.normal(size=ch).astype(dtype),
    )


def benchmark(lengths, block_sizes, channels=32, n_state=16, batch=1, repeats=3, seed=0,
              input_rule="euler"):
    """Timing rows comparing the step-by-step scan with the blocked scan.

    Each row is ``(length, block_size, naive_s, blocked_s, max_abs_diff)``
    with best-of-``repeats`` wall times.
    """
    import time

    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        s = random_scan_inputs(rng, batch, length, channels, n_state)
        args = (s.x, s.delta, s.A, s.B, s.C, s.D)

        def best(fn):
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                out = fn()
                times.append(time.perf_counter() - t0)
            return min(times), out

        t_naive, y_naive = best(lambda: selective_scan_naive(*args, input_rule=input_rule))
        for bs in block_sizes:
            t_block, y_block = best(lambda: selective_scan_blocked(
                *args, block_size=bs, input_rule=input_rule))
            rows.append((length, bs, t_naive, t_block, float(np.max(np.abs(y_block - y_naive)))))
    return rows


def scan(x, delta, A, B, C, D, input_rule="euler"):
    """Differentiable selective scan (fused kernel).

    x, delta (B, L, Ch); A (Ch, S) negative; B, C (B, L, S); D (Ch,).  A
    non-finite output raises :class:`NumericError` naming the first timestep.
    """
    y = dm.selective_scan(x, delta, A, B, C, D, input_rule=input_rule)
    if not np.all(np.isfinite(y.value)):
        bad = ~np.isfinite(y.value)
        t = int(np.nonzero(bad.any(axis=(0, 2)))[0][0])
        raise NumericError(f"non-finite scan state at timestep {t}", node=y)
    return y


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class SSMDims:
    d: int
    d_inner: int
    n_state: int = 16
    conv_width: int = 4
    reduction: int = 4


def init_mamba(builder: nn.ParamBuilder, name, dims: SSMDims, dt_range=(1e-3, 0.1)):
    """Mamba block parameters.

    ``A_log`` rows hold ``log(1..n_state)`` so states span timescales; the
    step bias is the inverse softplus of log-uniform draws in ``dt_range``.
    """
    d, di, ns, w = dims.d, dims.d_inner, dims.n_state, dims.conv_width
    rng = builder.rng
    builder.linear(name + ".in_x", d, di)
    builder.linear(name + ".in_z", d, di)
    bound = 1.0 / np.sqrt(w)
    builder.add(name + ".conv.w", rng.uniform(-bound, bound, size=(di, 1, w)))
    builder.add(name + ".conv.b", np.zeros(di))
    builder.linear(name + ".x_B", di, ns, bias=False)
    builder.linear(name + ".x_C", di, ns, bias=False)
    builder.linear(name + ".x_dt", di, di, bias=False)
    dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), size=di))
    builder.add(name + ".dt_bias", dt + np.log(-np.expm1(-dt)))
    builder.add(name + ".A_log", np.log(np.tile(np.arange(1, ns + 1, dtype=np.float64), (di, 1))))
    builder.add(name + ".D", np.ones(di))
    builder.linear(name + ".out", di, d)


def selective_params(x, params, prefix="mamba"):
    """Input-dependent ``(B, C, delta)`` from a (B, L, d_inner) sequence."""
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    Bs = nn.linear(x, p["x_B.w"])
    Cs = nn.linear(x, p["x_C.w"])
    delta = dm.softplus(nn.linear(x, p["x_dt.w"]) + p["dt_bias"])
    return Bs, Cs, delta


def state_matrix(params, prefix="mamba"):
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    return dm.neg(dm.exp(p["A_log"]))


def causal_depthwise_conv(u, w, b):
    """Depthwise causal convolution along the sequence (left zero padding)."""
    width = w.shape[-1]
    return dm.grouped_conv1d(u, w, groups=u.shape[-1], pad_left=width - 1) + b


def mamba_block(F, params, input_rule="euler", mixer="ssm", prefix="mamba"):
    """``F + out(mixer(conv(in_x(F))) * silu(in_z(F)))``.

    ``mixer`` is "ssm" (selective scan), "linear_attention" (single-head
    normalized-kernel attention replacing the scan) or "none" (the gated
    pointwise path without convolution or sequence mixing).
    """
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    u = nn.linear(F, p["in_x.w"], p["in_x.b"])
    gate = dm.silu(nn.linear(F, p["in_z.w"], p["in_z.b"]))
    if mixer == "none":
        y = u
    else:
        x = causal_depthwise_conv(u, p["conv.w"], p["conv.b"])
        if mixer == "ssm":
            Bs, Cs, delta = selective_params(x, p)
            y = scan(x, delta, state_matrix(p), Bs, Cs, p["D"], input_rule=input_rule)
        elif mixer == "linear_attention":
            y = linear_attention(x, p.sub("attn"))
        else:
            raise ContractError(f"unknown mixer {mixer!r}")
    return F + nn.linear(y * gate, p["out.w"], p["out.b"])


def init_linear_attention(builder, name, width):
    for part in ("q", "k", "v"):
        builder.linear(f"{name}.{part}", width, width, bias=False)


def linear_attention(x, params, eps=1e-6):
    """Single-head attention with kernel ``phi = softplus``.

    ``out_i = phi(q_i) . sum_j phi(k_j) v_j^T / (phi(q_i) . sum_j phi(k_j))``.
    """
    p = params
    q = dm.softplus(nn.linear(x, p["q.w"]))
    k = dm.softplus(nn.linear(x, p["k.w"]))
    v = nn.linear(x, p["v.w"])
    kv = dm.matmul(dm.transpose(k, (0, 2, 1)), v)
    ksum = dm.sum(k, axis=1, keepdims=True)
    num = dm.matmul(q, kv)
    den = dm.sum(q * ksum, axis=-1, keepdims=True) + eps
    return num / den


def init_channel_aware(builder, name, d, reduction):
    builder.batch_norm(name + ".bn", d)
    hidden = max(d // reduction, 1)
    builder.linear(name + ".fc1", d, hidden)
    builder.linear(name + ".fc2", hidden, d)


def channel_aware(F_M, params, state=None, train=False, exact=False, gate=True,
                  prefix="ca"):
    """``F_CN = silu(BN(CN(F_M)))`` scaled per channel by ``W' in (0,1)^d``.

    Returns ``(F_CA, W')``; with ``gate=False`` the output is ``F_CN`` and W'
    is None.
    """
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, prefix + ".")
    h = nn.context_norm(F_M, exact=exact)
    h = nn.batch_norm(h, p["bn.gamma"], p["bn.beta"], state, p.key("bn"), train, exact=exact)
    F_CN = dm.silu(h)
    if not gate:
        return F_CN, None
    pooled = dm.mean(F_CN, axis=1, order_invariant=exact)
    W = dm.sigmoid(nn.linear(dm.silu(nn.linear(pooled, p["fc1.w"], p["fc1.b"])),
                             p["fc2.w"], p["fc2.b"]))
    return F_CN * dm.reshape(W, (W.shape[0], 1, W.shape[1])), W
