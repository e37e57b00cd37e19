"""Finite-difference gradient audits at three scopes.

``primitive``: every differentiable primitive on a small random instance.
``module``: each network block with its own parameters and input.
``model``: the full loss on a 16-point instance, every parameter group.
All audits run in double precision with fixed seeds.
"""

from __future__ import annotations

import warnings
import zlib

import numpy as np

from . import diffmath as dm
from . import graph, nn, sequencer, ssm
from .exceptions import DegenerateGeometryWarning
from .model import ModelConfig, embed, forward, init_params, total_loss

RTOL = 1e-4
ATOL = 1e-6
SCOPES = ("primitive", "module", "model")


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * 10, x)


def _scan_inputs(rng, nb=2, length=6, ch=3, ns=4):
    return [
        rng.normal(size=(nb, length, ch)),
        rng.uniform(0.05, 0.8, size=(nb, length, ch)),
        -rng.uniform(0.3, 2.0, size=(ch, ns)),
        rng.normal(size=(nb, length, ns)),
        rng.normal(size=(nb, length, ns)),
        rng.normal(size=ch),
    ]


_W = np.random.default_rng(99).normal(size=(2, 3, 5))
_RAMP = np.linspace(-1, 1, 36).reshape(2, 6, 3)

# name -> (input maker, scalar function); several names may exercise one primitive
PRIMITIVE_CASES = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))],
            lambda a, b: dm.sum((a + b) * _W[0, :, :4])),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))],
            lambda a, b: dm.sum((a - b) * (a - b))),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))],
            lambda a, b: dm.sum(a * b * a)),
    "div": (lambda r: [r.normal(size=5), r.uniform(1, 2, size=5)], lambda a, b: dm.sum(a / b)),
    "neg": (lambda r: [r.normal(size=5)], lambda a: dm.sum(-a * a * a)),
    "exp": (lambda r: [r.normal(size=5)], lambda a: dm.sum(dm.exp(a))),
    "log": (lambda r: [r.uniform(0.5, 2, size=5)], lambda a: dm.sum(dm.log(a) * a)),
    "rsqrt": (lambda r: [r.uniform(0.5, 2, size=5)], lambda a: dm.sum(dm.rsqrt(a))),
    "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))],
               lambda a, b: dm.sum(dm.matmul(a, b) * _W)),
    "matmul-row-stable": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))],
                          lambda a, b: dm.sum(dm.matmul(a, b, row_stable=True) * _W)),
    "matmul-batched": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))],
                       lambda a, b: dm.sum(dm.matmul(a, b) * dm.matmul(a, b))),
    "softmax": (lambda r: [r.normal(size=(3, 5))],
                lambda a: dm.sum(dm.softmax(a, axis=-1) * _W[0])),
    "sigmoid": (lambda r: [r.normal(size=5) * 3], lambda a: dm.sum(dm.sigmoid(a) * a)),
    "silu": (lambda r: [r.normal(size=5) * 3], lambda a: dm.sum(dm.silu(a) * a)),
    "tanh": (lambda r: [r.normal(size=5)], lambda a: dm.sum(dm.tanh(a) * a)),
    "relu": (lambda r: [_away_from_zero(r, 6)], lambda a: dm.sum(dm.relu(a) * a)),
    "softplus": (lambda r: [r.normal(size=5) * 3], lambda a: dm.sum(dm.softplus(a) * a)),
    "sum": (lambda r: [r.normal(size=(3, 4))],
            lambda a: dm.sum(dm.sum(a, axis=0) * dm.sum(a, axis=0))),
    "mean": (lambda r: [r.normal(size=(3, 4))],
             lambda a: dm.sum(dm.mean(a, axis=1, order_invariant=True) * dm.mean(a, axis=1))),
    "var": (lambda r: [r.normal(size=(3, 4))],
            lambda a: dm.sum(dm.var(a, axis=1, keepdims=True) * a)),
    "concat": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 3))],
               lambda a, b: dm.sum(dm.concat([a, b], axis=1) * _W[0])),
    "gather": (lambda r: [r.normal(size=(2, 4, 3))],
               lambda a: dm.sum(dm.gather(a, np.array([[0, 0, 3], [2, 1, 1]])) * _W[:, :, :3])),
    "gather-take": (lambda r: [r.normal(size=(3, 5))],
                    lambda a: dm.sum(dm.gather(a, np.array([4, 0, 0]), axis=1) * _W[0, :, :3])),
    "scatter": (lambda r: [r.normal(size=(2, 3, 2))],
                lambda a: dm.sum(dm.scatter(a, np.array([[2, 0, 1], [0, 1, 2]]), 3)
                                 * _W[:, :, :2])),
    "reshape": (lambda r: [r.normal(size=(3, 4))],
                lambda a: dm.sum(dm.reshape(a, (12,)) * np.arange(12.0))),
    "transpose": (lambda r: [r.normal(size=(3, 5))], lambda a: dm.sum(dm.transpose(a) * _W[0].T)),
    "grouped-conv-1d": (lambda r: [r.normal(size=(2, 7, 4)), r.normal(size=(6, 2, 3))],
                        lambda a, b: dm.sum(dm.grouped_conv1d(a, b, groups=2, stride=2,
                                                              pad_left=1) * 1.3)),
    "grouped-conv-1d-dense-stride": (
        lambda r: [r.normal(size=(3, 6, 4)), r.normal(size=(5, 4, 3))],
        lambda a, b: dm.sum(dm.grouped_conv1d(a, b, stride=3) * dm.grouped_conv1d(a, b, stride=3))),
    "grouped-conv-1d-depthwise": (
        lambda r: [r.normal(size=(2, 6, 3)), r.normal(size=(3, 1, 4))],
        lambda a, b: dm.sum(dm.grouped_conv1d(a, b, groups=3, pad_left=3)
                            * np.arange(18.0).reshape(1, 6, 3))),
    "symmetric-smallest-eigenpair": (
        lambda r: [r.normal(size=(2, 4, 4))],
        lambda a: dm.sum(dm.sym_smallest_eigenpair(a)[0] * _W[:, 0, :4])
        + dm.sum(dm.sym_smallest_eigenpair(a)[1])),
    "selective-scan": (_scan_inputs, lambda *a: dm.sum(dm.selective_scan(*a) * _RAMP)),
    "selective-scan-zoh": (_scan_inputs,
                           lambda *a: dm.sum(dm.selective_scan(*a, input_rule="zoh") * _RAMP)),
}


def case_primitive(name):
    """The primitive exercised by a case name."""
    for prim in sorted(dm.primitive_set(), key=len, reverse=True):
        if name == prim or name.startswith(prim + "-"):
            return prim
    raise KeyError(name)


def _merge(reports, prefix_names):
    merged = dm.GradReport(rtol=RTOL, atol=ATOL)
    for report, prefix in zip(reports, prefix_names):
        for e in report.entries:
            e.name = f"{prefix}/{e.name}"
            merged.entries.append(e)
    return merged


def audit_primitives(rtol=RTOL, atol=ATOL):
    reports, names = [], []
    for name, (make, f) in sorted(PRIMITIVE_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        reports.append(dm.finite_diff_check(f, make(rng), rtol=rtol, atol=atol))
        names.append(name)
    return _merge(reports, names)


# ---------------------------------------------------------------- modules

def _weights(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def _module_cases():
    """name -> (inputs dict, scalar function of a dict of tensors)."""
    cases = {}

    b = nn.ParamBuilder(np.random.default_rng(1))
    b.linear("embed.fc1", 4, 16)
    b.batch_norm("embed.bn", 16)
    b.linear("embed.fc2", 16, 16)
    inputs = dict(b.params, input=_weights((1, 8, 4), 2))
    w = _weights((1, 8, 16), 3)
    cases["embed"] = (inputs, lambda P, w=w: dm.sum(embed(P["input"], P, train=True) * w))

    b = nn.ParamBuilder(np.random.default_rng(4))
    sequencer.init_scorer(b, "scorer", 32)
    inputs = dict(b.params, input=_weights((1, 8, 32), 5))
    w = _weights((1, 8), 6)
    cases["scorer"] = (inputs, lambda P, w=w: dm.sum(sequencer.score(P, P["input"], train=True) * w))

    b = nn.ParamBuilder(np.random.default_rng(7))
    sequencer.init_scorer(b, "scorer", 8)
    feats = _weights((2, 8, 8), 8)
    inputs = dict(b.params, input=feats)
    w = _weights((2, 8, 8), 9)

    _, base = sequencer.causal_sequence(inputs, feats, tau=0.7, noise_enabled=True,
                                        rng=np.random.default_rng(10), train=True)
    anchor = (base.index, base.soft.value)

    def cslb(P, w=w):
        Fs, _ = sequencer.causal_sequence(P, P["input"], tau=0.7, noise_enabled=True,
                                          rng=np.random.default_rng(10), train=True,
                                          anchor=anchor)
        return dm.sum(Fs * w)

    cases["cslb"] = (inputs, cslb)

    b = nn.ParamBuilder(np.random.default_rng(11))
    graph.init_lgpl(b, "lgpl", 8, 4, 2)
    inputs = dict(b.params, input=_weights((2, 8, 8), 12))
    w = _weights((2, 8, 8), 13)
    cases["lgpl"] = (inputs, lambda P, w=w: dm.sum(graph.lgpl(P["input"], P, 4, 2, train=True) * w))

    b = nn.ParamBuilder(np.random.default_rng(14))
    ssm.init_mamba(b, "mamba", ssm.SSMDims(8, 8, 4))
    x = _weights((1, 4, 8), 15)
    keep = {k: v for k, v in b.params.items() if k.split(".")[1] in ("x_B", "x_C", "x_dt", "dt_bias")}
    inputs = dict(keep, input=x)
    w3 = [_weights((1, 4, 4), 16), _weights((1, 4, 4), 17), _weights((1, 4, 8), 18)]

    def sel(P):
        Bs, Cs, delta = ssm.selective_params(P["input"], P)
        return dm.sum(Bs * w3[0]) + dm.sum(Cs * w3[1]) + dm.sum(delta * w3[2])

    cases["selective_params"] = (inputs, sel)

    b = nn.ParamBuilder(np.random.default_rng(19))
    ssm.init_mamba(b, "mamba", ssm.SSMDims(16, 16, 4))
    inputs = dict(b.params, input=_weights((1, 8, 16), 20))
    w = _weights((1, 8, 16), 21)
    cases["mamba"] = (inputs, lambda P, w=w: dm.sum(ssm.mamba_block(P["input"], P) * w))
    cases["mamba_zoh"] = (dict(inputs), lambda P, w=w: dm.sum(
        ssm.mamba_block(P["input"], P, input_rule="zoh") * w))

    b = nn.ParamBuilder(np.random.default_rng(22))
    ssm.init_mamba(b, "mamba", ssm.SSMDims(16, 32, 4))
    ssm.init_channel_aware(b, "ca", 16, 4)
    inputs = dict(b.params, input=_weights((2, 8, 16), 23))
    w = _weights((2, 8, 16), 24)

    def camf(P, w=w):
        F_M = ssm.mamba_block(P["input"], P)
        F_CA, _ = ssm.channel_aware(F_M, P, train=True)
        return dm.sum(F_CA * w)

    cases["camf"] = (inputs, camf)

    b = nn.ParamBuilder(np.random.default_rng(25))
    ssm.init_linear_attention(b, "attn", 8)
    inputs = dict(b.params, input=_weights((2, 6, 8), 26))
    w = _weights((2, 6, 8), 27)
    cases["linear_attention"] = (
        inputs, lambda P, w=w: dm.sum(ssm.linear_attention(P["input"], nn.Scope(P, "attn.")) * w))
    return cases


def audit_modules(rtol=RTOL, atol=ATOL, max_coords=24):
    reports, names = [], []
    for name, (inputs, f) in _module_cases().items():
        reports.append(dm.finite_diff_check(f, inputs, rtol=rtol, atol=atol,
                                            max_coords=max_coords, seed=1))
        names.append(name)
    return _merge(reports, names)


# ------------------------------------------------------------------ model

def model_instance(n_points=16, seed=0):
    """Config, params and a labelled batch for the whole-model audit.

    Head biases start at 0.5 so most weights are positive and every layer
    yields a valid essential estimate, exercising the regression path.
    """
    from .synthdata import SceneSpec, generate_scene

    config = ModelConfig(n_layers=2, d=32, n_state=4, dtype="float64")
    params, _ = init_params(config, seed)
    for l in range(config.n_layers):
        params[f"layer{l}.head.b"] = np.full(1, 0.5)
    scene = generate_scene(SceneSpec(n_points=n_points, outlier_ratio=0.25, noise_sigma=1e-3,
                                     seed=seed))
    corr = scene.corr
    return config, params, (corr.coords[None], corr.labels[None], corr.essential[None])


def model_loss(config, params, batch, alpha=1.0, beta=0.5, seed=3):
    """Training loss as a function of the parameters, with the causal
    orders anchored at ``params`` (the straight-through surrogate)."""
    coords, labels, E = batch
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGeometryWarning)
        anchors = forward(coords, params, config, None, mode="train", seed=seed).anchors

    def f(P):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGeometryWarning)
            out = forward(coords, P, config, None, mode="train", seed=seed,
                          anchors=anchors or None)
            loss, _ = total_loss(out, labels, E, coords, alpha, beta, config)
        return loss

    return f


def audit_model(rtol=RTOL, atol=ATOL, max_coords=6, n_points=16, seed=0):
    """Every parameter tensor probed at up to ``max_coords`` coordinates."""
    config, params, batch = model_instance(n_points, seed)
    return dm.finite_diff_check(model_loss(config, params, batch), params, rtol=rtol, atol=atol,
                                max_coords=max_coords, seed=seed)


def run(scope, rtol=RTOL, atol=ATOL):
    if scope == "primitive":
        return audit_primitives(rtol, atol)
    if scope == "module":
        return audit_modules(rtol, atol)
    if scope == "model":
        return audit_model(rtol, atol)
    raise ValueError(f"scope must be one of {SCOPES}")
