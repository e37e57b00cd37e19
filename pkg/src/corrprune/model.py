"""The stacked correspondence-pruning network and its losses.

Each layer orders the points (sequencer), mixes local neighbourhoods
(graph), filters the ordered sequence (ssm), restores the input order and
predicts one logit per correspondence.  Per-layer essential matrices come
from the weighted eight-point solver with weights ``tanh(relu(o))``.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import diffmath as dm
from . import geometry, graph, nn, sequencer, ssm
from .exceptions import ConfigError, DegenerateGeometryWarning, UnderConstrainedError

DTYPES = {"float64": np.float64, "float32": np.float32}
# "label_oracle" checkpoints emit +/-ORACLE_LOGIT from ground-truth labels;
# they exist to test the evaluation and prediction plumbing end to end
PREDICTORS = ("network", "label_oracle")
ORACLE_LOGIT = 30.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss switches.

    The ``use_*`` flags toggle the blocks independently.  The sequence mixer
    is the selective scan when ``use_mamba`` is set, the linear-attention
    substitute when ``use_linear_attention`` is set, and a gated pointwise map
    when neither is.
    """

    n_layers: int = 4
    d: int = 128
    d_inner: Optional[int] = None
    n_state: int = 16
    conv_width: int = 4
    reduction: int = 4
    k: int = 9
    groups: int = 3
    tau: float = 1.0
    tau_decay: float = 1.0
    tau_min: float = 1e-2
    gumbel_noise: bool = True
    knn_space: str = "feature"
    input_discretization: str = "euler"
    sampson_denominator: str = "groundtruth"
    reg_rows: str = "inliers"
    reg_reduction: str = "sum"
    balanced_bce: bool = True
    use_cslb: bool = True
    use_lgpl: bool = True
    use_mamba: bool = True
    use_channel_aware: bool = True
    use_linear_attention: bool = False
    bidirectional: bool = False
    dtype: str = "float64"
    predictor: str = "network"

    def __post_init__(self):
        choices = {
            "knn_space": ("feature", "coords"),
            "input_discretization": ssm.INPUT_RULES,
            "sampson_denominator": ("groundtruth", "estimate"),
            "reg_rows": ("inliers", "all"),
            "reg_reduction": ("sum", "mean"),
            "dtype": tuple(DTYPES),
            "predictor": PREDICTORS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}",
                                  key=key)
        for key in ("n_layers", "d", "n_state", "conv_width", "reduction", "k", "groups"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self.k % self.groups:
            raise ConfigError(f"groups={self.groups} must divide k={self.k}", key="groups")
        if not self.tau > 0 or not 0 < self.tau_decay <= 1 or not self.tau_min > 0:
            raise ConfigError("temperature settings must be positive (tau_decay <= 1)", key="tau")
        if self.use_mamba and self.use_linear_attention:
            raise ConfigError("use_mamba and use_linear_attention are exclusive",
                              key="use_linear_attention")
        if self.bidirectional:
            raise ConfigError("bidirectional scanning is reserved and not implemented",
                              key="bidirectional")

    @property
    def inner(self):
        return self.d_inner or 2 * self.d

    @property
    def mixer(self):
        if self.use_mamba:
            return "ssm"
        return "linear_attention" if self.use_linear_attention else "none"

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def temperature(self, iteration=0):
        return max(self.tau_min, self.tau * self.tau_decay ** iteration)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}", key=sorted(unknown)[0])
        return cls(**values)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loss weights.

    The learning rate stays at ``lr`` until ``decay_start`` and is then
    multiplied by ``lr_decay`` once per step.  The regression weight is 0
    before ``beta_warmup`` and ``beta`` from that iteration on.
    """

    lr: float = 1e-3
    lr_decay: float = 0.999996
    decay_start: int = 80000
    batch_size: int = 32
    alpha: float = 1.0
    beta: float = 0.5
    beta_warmup: int = 20000
    iterations: int = 500000
    seed: int = 0
    checkpoint_every: int = 5000
    log_every: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]", key="lr")
        for key in ("batch_size", "iterations", "checkpoint_every", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        for key in ("decay_start", "beta_warmup"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=key)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative", key="alpha")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam constants out of range", key="adam_beta1")

    def learning_rate(self, iteration):
        return self.lr * self.lr_decay ** max(0, iteration - self.decay_start)

    def beta_at(self, iteration):
        return self.beta if iteration >= self.beta_warmup else 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}", key=sorted(unknown)[0])
        return cls(**values)


# Table-style ablation presets: which blocks are active
ABLATIONS = {
    "i": dict(use_cslb=False, use_lgpl=False, use_mamba=True, use_channel_aware=True),
    "ii": dict(use_cslb=False, use_lgpl=True, use_mamba=True, use_channel_aware=False),
    "iii": dict(use_cslb=False, use_lgpl=True, use_mamba=False, use_channel_aware=True),
    "iv": dict(use_cslb=False, use_lgpl=True, use_mamba=False, use_channel_aware=True,
               use_linear_attention=True),
    "v": dict(use_cslb=False, use_lgpl=True, use_mamba=True, use_channel_aware=True),
    "vi": dict(use_cslb=True, use_lgpl=True, use_mamba=True, use_channel_aware=True),
}


def ablation(config: ModelConfig, row: str) -> ModelConfig:
    """``config`` with the block switches of an ablation row."""
    try:
        flags = ABLATIONS[row]
    except KeyError:
        raise ConfigError(f"unknown ablation row {row!r}", key="ablation") from None
    return replace(config, **{"use_linear_attention": False, **flags})


# ------------------------------------------------------------------ params

def init_params(config: ModelConfig, seed=0):
    """Fresh parameters and normalization state for ``config``."""
    b = nn.ParamBuilder(np.random.default_rng(seed), config.np_dtype)
    if config.predictor != "network":
        return b.params, b.state
    d = config.d
    b.linear("embed.fc1", 4, d)
    b.batch_norm("embed.bn", d)
    b.linear("embed.fc2", d, d)
    dims = ssm.SSMDims(d, config.inner, config.n_state, config.conv_width, config.reduction)
    for l in range(config.n_layers):
        pre = f"layer{l}"
        if config.use_cslb:
            sequencer.init_scorer(b, pre + ".scorer", d)
        if config.use_lgpl:
            graph.init_lgpl(b, pre + ".lgpl", d, config.k, config.groups)
        if config.mixer == "ssm":
            ssm.init_mamba(b, pre + ".mamba", dims)
        else:
            b.linear(pre + ".mamba.in_x", d, dims.d_inner)
            b.linear(pre + ".mamba.in_z", d, dims.d_inner)
            b.linear(pre + ".mamba.out", dims.d_inner, d)
            if config.mixer == "linear_attention":
                bound = 1.0 / np.sqrt(dims.conv_width)
                b.add(pre + ".mamba.conv.w", b.rng.uniform(-bound, bound,
                                                           size=(dims.d_inner, 1, dims.conv_width)))
                b.add(pre + ".mamba.conv.b", np.zeros(dims.d_inner))
                ssm.init_linear_attention(b, pre + ".mamba.attn", dims.d_inner)
        ssm.init_channel_aware(b, pre + ".ca", d, config.reduction)
        b.linear(pre + ".head", d, 1)
    return b.params, b.state


def parameter_groups(params):
    """Parameter names grouped by their module path (without the leaf name)."""
    groups = {}
    for name in params:
        groups.setdefault(name.rsplit(".", 1)[0], []).append(name)
    return groups


# ----------------------------------------------------------------- forward

def _as_batch(coords):
    coords = np.asarray(coords)
    if coords.ndim == 2:
        coords = coords[None]
    if coords.ndim != 3 or coords.shape[-1] != 4:
        raise ValueError(f"coords must be (B, N, 4) or (N, 4), got {coords.shape}")
    if coords.shape[1] < 8:
        raise ValueError("at least 8 correspondences are required")
    return coords


def embed(coords, params, state=None, train=False, exact=False):
    """Pointwise lift R^4 -> R^d: fc, context norm, batch norm, relu, fc."""
    p = params if isinstance(params, nn.Scope) else nn.Scope(params, "embed.")
    h = nn.linear(coords, p["fc1.w"], p["fc1.b"], exact=exact)
    h = nn.context_norm(h, exact=exact)
    h = nn.batch_norm(h, p["bn.gamma"], p["bn.beta"], state, p.key("bn"), train, exact=exact)
    h = dm.relu(h)
    return nn.linear(h, p["fc2.w"], p["fc2.b"], exact=exact)


# tanh saturates to exactly 1.0 in double precision near o = 19; the scale
# keeps every probability strictly below one
PROB_SCALE = 1.0 - 1e-9


def inlier_probability(logits):
    """``(1 - 1e-9) tanh(relu(o))`` in [0, 1); the decision is ``o > 0``."""
    if isinstance(logits, dm.Tensor):
        return dm.tanh(dm.relu(logits)) * PROB_SCALE
    return PROB_SCALE * np.tanh(np.maximum(np.asarray(logits, dtype=np.float64), 0.0))


@dataclass
class LayerOutput:
    """Per-layer logits and essential estimates plus final probabilities."""

    logits: list
    probabilities: np.ndarray
    essentials: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    anchors: list = field(default_factory=list)

    @property
    def final_logits(self):
        return self.logits[-1].value

    @property
    def decisions(self):
        return self.final_logits > 0


def layer_essential(coords, logits):
    """Weighted eight-point per item; items with < 8 positive weights are invalid.

    Returns ``(E, valid)`` where E (n_valid, 3, 3) is a Tensor or None.
    """
    w = inlier_probability(logits)
    valid = (w.value > 0).sum(axis=-1) >= 8
    if not valid.any():
        return None, valid
    idx = np.nonzero(valid)[0]
    wv = w if valid.all() else dm.gather(w, idx, axis=0)
    try:
        E = geometry.weighted_eight_point(coords[idx].astype(w.dtype), wv)
    except UnderConstrainedError:
        return None, np.zeros_like(valid)
    return E, valid


def forward(coords, params, config: ModelConfig, state=None, mode="eval", seed=0,
            iteration=0, essentials=True, anchors=None):
    """Run the network on a batch of correspondence coordinates.

    ``mode="train"`` uses batch statistics (updating ``state``) and Gumbel
    noise; ``mode="eval"`` uses running statistics, no noise and
    permutation-exact arithmetic.  ``params`` values may be arrays or Tensors.
    ``anchors`` (one ``(order, Y0)`` per layer, as recorded in
    ``LayerOutput.anchors``) freezes the causal orders for gradient audits.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if config.predictor != "network":
        raise ConfigError(f"predictor {config.predictor!r} has no network forward",
                          key="predictor")
    train = mode == "train"
    exact = not train
    coords = _as_batch(coords)
    dtype = next(iter(params.values())).dtype
    coords = coords.astype(dtype, copy=False)
    nb, n, _ = coords.shape
    P = nn.Scope(params)
    rng = np.random.default_rng(seed)
    tau = config.temperature(iteration)

    F = embed(coords, P.sub("embed"), state, train, exact)
    out = LayerOutput([], None)
    for l in range(config.n_layers):
        lp = P.sub(f"layer{l}")
        order = None
        if config.use_cslb:
            Fs, co = sequencer.causal_sequence(
                lp.sub("scorer"), F, tau=tau, noise_enabled=train and config.gumbel_noise,
                rng=rng, state=state, train=train, exact=exact,
                anchor=None if anchors is None else anchors[l])
            order = co.index
            out.anchors.append((order, co.soft.value.copy()))
        else:
            Fs = F
        if config.use_lgpl:
            src = None
            if config.knn_space == "coords":
                src = coords if order is None else np.take_along_axis(coords, order[..., None], 1)
            Fs = graph.lgpl(Fs, lp.sub("lgpl"), config.k, config.groups, state=state,
                            train=train, exact=exact, knn_source=src)
        F_M = ssm.mamba_block(Fs, lp.sub("mamba"), input_rule=config.input_discretization,
                              mixer=config.mixer)
        F_CA, _ = ssm.channel_aware(F_M, lp.sub("ca"), state=state, train=train, exact=exact,
                                    gate=config.use_channel_aware)
        if order is not None:
            F_CA = sequencer.restore_order(F_CA, order)
        o = nn.linear(F_CA, lp["head.w"], lp["head.b"], exact=exact)
        o = dm.reshape(o, (nb, n))
        F = F + F_CA
        out.logits.append(o)
        out.orders.append(order)
        if essentials:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateGeometryWarning)
                E, valid = layer_essential(coords, o)
            out.essentials.append(E)
            out.valid.append(valid)
    out.probabilities = inlier_probability(out.logits[-1].value)
    return out


# ------------------------------------------------------------------ losses

def classification_loss(logits, labels, balanced=True):
    """Mean binary cross-entropy on logits.

    With ``balanced`` the positive terms are weighted by #neg/#pos over the
    whole batch, clamped to [0.1, 10].
    """
    tensor_in = isinstance(logits, dm.Tensor)
    o = dm._wrap(logits)
    z = np.asarray(labels, dtype=o.dtype).reshape(o.shape)
    if balanced:
        pos = z.sum()
        ratio = (z.size - pos) / pos if pos > 0 else np.inf
        pw = float(np.clip(ratio, 0.1, 10.0))
    else:
        pw = 1.0
    per = (pw * z) * dm.softplus(-o) + (1.0 - z) * dm.softplus(o)
    loss = dm.mean(per)
    return loss if tensor_in else float(loss.value)


def regression_term(E_hat, E_gt, coords, labels, valid, config: ModelConfig):
    """Batch-averaged Sampson regression for one layer's valid items."""
    idx = np.nonzero(valid)[0]
    c = np.asarray(coords)[idx]
    rows = None
    if config.reg_rows == "inliers":
        rows = np.asarray(labels)[idx].astype(c.dtype)
    per_item = geometry.regression_loss(E_hat, np.asarray(E_gt)[idx], c,
                                        denominator=config.sampson_denominator,
                                        row_weights=rows)
    if config.reg_reduction == "mean":
        count = rows.sum(axis=-1) if rows is not None else np.full(len(idx), c.shape[1])
        per_item = per_item / np.maximum(count, 1.0).astype(c.dtype)
    return dm.mean(per_item)


def total_loss(output: LayerOutput, labels, E_gt, coords, alpha=1.0, beta=0.0,
               config: ModelConfig = ModelConfig()):
    """``sum_l alpha L_cls(o_l) + beta L_reg(E_l)``; invalid layers skip L_reg.

    Returns ``(loss Tensor, parts)`` where parts holds per-layer floats.
    """
    coords = _as_batch(coords)
    labels = np.asarray(labels).reshape(coords.shape[:2])
    total = dm.Tensor(np.zeros((), dtype=output.logits[0].dtype))
    parts = {"cls": [], "reg": []}
    for l, o in enumerate(output.logits):
        cls = classification_loss(o, labels, balanced=config.balanced_bce)
        total = total + alpha * cls
        parts["cls"].append(float(cls.value))
        if beta == 0:
            parts["reg"].append(0.0)
            continue
        E = output.essentials[l] if l < len(output.essentials) else None
        if E is None:
            warnings.warn(f"layer {l}: no valid essential estimate, regression skipped",
                          DegenerateGeometryWarning, stacklevel=2)
            parts["reg"].append(float("nan"))
            continue
        reg = regression_term(E, E_gt, coords.astype(o.dtype), labels, output.valid[l], config)
        total = total + beta * reg
        parts["reg"].append(float(reg.value))
    return total, parts
