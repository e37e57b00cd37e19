"""Training loop, Adam, the in-memory scene bank and pose evaluation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import diffmath as dm
from . import geometry
from .checkpoint import ModelCheckpoint
from .correspondence import CorrespondenceSet
from .exceptions import (CheiralityError, ContractError, DegenerateGeometryWarning,
                         EstimationFailure, NumericError, TrainingDiverged,
                         UnderConstrainedError)
from .model import (ORACLE_LOGIT, ModelConfig, TrainConfig, forward, init_params,
                    inlier_probability, total_loss)
from .synthdata import SceneSpec, generate_dataset, read_matches

log = logging.getLogger(__name__)

METRICS_HEADER = "iter\tloss\tcls_acc\tlr\tbeta"
AUC_THRESHOLDS = (5.0, 10.0, 20.0)


# ------------------------------------------------------------------ data

@dataclass
class SceneBank:
    """Stacked scenes of equal size: coords (S, N, 4), labels (S, N),
    essentials (S, 3, 3), ground-truth rotations and unit translations."""

    coords: np.ndarray
    labels: np.ndarray
    essentials: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.coords)

    @classmethod
    def from_scenes(cls, scenes):
        if not scenes:
            raise ContractError("no scenes given")
        return cls(np.stack([s.corr.coords for s in scenes]),
                   np.stack([s.corr.labels for s in scenes]),
                   np.stack([s.corr.essential for s in scenes]),
                   np.stack([s.rotation for s in scenes]),
                   np.stack([s.translation for s in scenes]))

    @classmethod
    def from_correspondences(cls, sets, names=None):
        """Bank from labelled sets; the pose is recovered from E and the labels."""
        sets = list(sets)
        if not sets:
            raise ContractError("no correspondence sets given")
        sizes = {len(c) for c in sets}
        if len(sizes) != 1:
            raise ContractError(f"scenes must share one size, got {sorted(sizes)}")
        rots, trans = [], []
        for c in sets:
            if c.labels is None or c.essential is None:
                raise ContractError("evaluation and training need labels and E")
            R, t = geometry.decompose_essential(c.essential, c.coords[c.labels == 1])
            rots.append(R)
            trans.append(t)
        return cls(np.stack([c.coords for c in sets]), np.stack([c.labels for c in sets]),
                   np.stack([c.essential for c in sets]), np.stack(rots), np.stack(trans),
                   list(names or []))

    @classmethod
    def synthetic(cls, spec: SceneSpec, count, seed):
        return cls.from_scenes(generate_dataset(spec, count, seed=seed))

    @classmethod
    def from_directory(cls, path):
        path = Path(path)
        files = sorted(path.glob("*.corr"))
        if not files:
            raise FileNotFoundError(f"no .corr files in {path}")
        return cls.from_correspondences([read_matches(f) for f in files],
                                        [f.name for f in files])

    def subset(self, index):
        index = np.asarray(index)
        names = [self.names[i] for i in index] if self.names else []
        return SceneBank(self.coords[index], self.labels[index], self.essentials[index],
                         self.rotations[index], self.translations[index], names)


def batch_seed(seed, iteration):
    """Integer seed of the batch drawn at ``iteration`` (reported on divergence)."""
    state = np.random.SeedSequence([seed, iteration]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def draw_batch(bank: SceneBank, batch_size, bseed):
    rng = np.random.default_rng(bseed)
    return rng.choice(len(bank), size=min(batch_size, len(bank)), replace=False)


# ------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, m=None, v=None, step=0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = dict(m or {})
        self.v = dict(v or {})
        self.step_count = step

    def step(self, params, grads, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in params:
            g = grads[name]
            p = params[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = (self.beta1 * m + (1.0 - self.beta1) * g).astype(p.dtype)
            v = (self.beta2 * v + (1.0 - self.beta2) * g * g).astype(p.dtype)
            self.m[name] = m
            self.v[name] = v
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p - update).astype(p.dtype)
        return params


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    metrics: list
    checkpoints: list


def _loss_and_grads(params, state, config, batch, seed, iteration, alpha, beta):
    coords, labels, E = batch

    def objective(P):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGeometryWarning)
            out = forward(coords, P, config, state, mode="train", seed=seed,
                          iteration=iteration, essentials=beta > 0)
            loss, _ = total_loss(out, labels, E, coords, alpha, beta, config)
        objective.logits = out.final_logits
        return loss

    value, grads = dm.value_and_grad(objective, params)
    return value, grads, objective.logits


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, data: SceneBank,
          out_dir=None, metrics_path=None, resume: Optional[ModelCheckpoint] = None,
          progress=None):
    """Optimize a fresh (or resumed) model on ``data``.

    Writes ``ckpt_<iter>.cmck`` every ``checkpoint_every`` iterations and
    ``final.cmck`` at the end when ``out_dir`` is given, and appends one
    metrics line per ``log_every`` iterations to ``metrics_path``.  Returns
    the final checkpoint and the logged rows.
    """
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        state = {k: v.copy() for k, v in resume.state.items()}
        opt = Adam(train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps,
                   resume.moments.get("m"), resume.moments.get("v"), resume.iteration)
        start = resume.iteration
        model_cfg = resume.model_config
    else:
        params, state = init_params(model_cfg, train_cfg.seed)
        opt = Adam(train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
        start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    sink = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = resume is None or not metrics_path.exists()
        sink = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            sink.write(METRICS_HEADER + "\n")

    def snapshot(it):
        return ModelCheckpoint(model_cfg, {k: v.copy() for k, v in params.items()},
                               {k: v.copy() for k, v in state.items()}, train_cfg,
                               {"m": dict(opt.m), "v": dict(opt.v)}, it)

    rows, written = [], []
    dtype = model_cfg.np_dtype
    try:
        for it in range(start, train_cfg.iterations):
            bseed = batch_seed(train_cfg.seed, it)
            idx = draw_batch(data, train_cfg.batch_size, bseed)
            batch = (data.coords[idx].astype(dtype), data.labels[idx], data.essentials[idx])
            lr = train_cfg.learning_rate(it)
            beta = train_cfg.beta_at(it)
            try:
                value, grads, logits = _loss_and_grads(params, state, model_cfg, batch, bseed,
                                                       it, train_cfg.alpha, beta)
            except NumericError as exc:
                raise TrainingDiverged(f"iteration {it}: {exc} (batch seed {bseed})",
                                       batch_seed=bseed) from exc
            loss = float(value)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"iteration {it}: non-finite loss (batch seed {bseed})",
                                       batch_seed=bseed)
            opt.step(params, grads, lr)
            acc = float(np.mean((logits > 0) == (batch[1] > 0)))
            if (it - start) % train_cfg.log_every == 0 or it == train_cfg.iterations - 1:
                row = (it, loss, acc, lr, beta)
                rows.append(row)
                if sink is not None:
                    sink.write(f"{it}\t{loss!r}\t{acc!r}\t{lr!r}\t{beta!r}\n")
                    sink.flush()
            if progress is not None:
                progress(it, loss, acc)
            done = it + 1
            if out_dir is not None and done % train_cfg.checkpoint_every == 0:
                written.append(ckpt_io.save(out_dir / f"ckpt_{done:07d}.cmck", snapshot(done)))
    finally:
        if sink is not None:
            sink.close()
    final = snapshot(max(start, train_cfg.iterations))
    if out_dir is not None:
        written.append(ckpt_io.save(out_dir / "final.cmck", final))
    return TrainResult(final, rows, written)


def read_metrics(path):
    """Rows ``(iter, loss, cls_acc, lr, beta)`` of a metrics log."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            it, loss, acc, lr, beta = line.rstrip("\n").split("\t")
            rows.append((int(it), float(loss), float(acc), float(lr), float(beta)))
    return rows


# ------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    auc: dict
    pose_errors: np.ndarray
    estimator: str

    def rows(self):
        out = [("precision", self.precision), ("recall", self.recall), ("f1", self.f1)]
        out += [(f"auc@{int(t)}", v) for t, v in self.auc.items()]
        return out


def classification_metrics(logits, labels):
    """Pooled precision, recall and F1 of the decisions ``o > 0``."""
    pred = np.asarray(logits) > 0
    truth = np.asarray(labels) > 0
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def estimate_pose(coords, logits, estimator="weighted", seed=0, ransac_iterations=2000):
    """``(R, t)`` from one scene's logits, or None when estimation fails."""
    coords = np.asarray(coords, dtype=np.float64)
    o = np.asarray(logits, dtype=np.float64)
    keep = o > 0
    try:
        if estimator == "weighted":
            w = inlier_probability(o)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateGeometryWarning)
                E = geometry.weighted_eight_point(coords, w)
            inliers = coords[keep]
        elif estimator == "ransac_post":
            if keep.sum() < 8:
                return None
            E, mask = geometry.ransac_eight_point(coords[keep], iterations=ransac_iterations,
                                                  seed=seed)
            inliers = coords[keep][mask]
        else:
            raise ContractError(f"unknown estimator {estimator!r}")
        return geometry.decompose_essential(E, inliers)
    except (UnderConstrainedError, EstimationFailure, CheiralityError):
        return None


def evaluate_logits(logits, data: SceneBank, estimator="weighted", seed=0):
    """Metrics for per-scene logits (S, N) against ``data``."""
    logits = np.asarray(logits)
    precision, recall, f1 = classification_metrics(logits, data.labels)
    errors = np.empty(len(data))
    for i in range(len(data)):
        pose = estimate_pose(data.coords[i], logits[i], estimator, seed=seed + i)
        if pose is None:
            errors[i] = np.inf
        else:
            errors[i] = geometry.pose_error(pose[0], pose[1], data.rotations[i],
                                            data.translations[i]).pose
    auc = dict(zip(AUC_THRESHOLDS, geometry.pose_auc(errors, AUC_THRESHOLDS)))
    return EvalReport(precision, recall, f1, auc, errors, estimator)


def predict_logits(ckpt: ModelCheckpoint, coords, batch_size=16, labels=None):
    """Final-layer eval-mode logits for stacked coords (S, N, 4).

    A ``label_oracle`` checkpoint needs ``labels`` and returns
    ``+/-ORACLE_LOGIT`` from them.
    """
    coords = np.asarray(coords)
    cfg = ckpt.model_config
    if cfg.predictor == "label_oracle":
        if labels is None:
            raise ContractError("the label oracle needs ground-truth labels")
        labels = np.asarray(labels).reshape(coords.shape[:-1])
        return np.where(labels > 0, ORACLE_LOGIT, -ORACLE_LOGIT)
    params = {k: v.astype(cfg.np_dtype, copy=False) for k, v in ckpt.params.items()}
    state = {k: v.copy() for k, v in ckpt.state.items()}
    out = []
    for start in range(0, len(coords), batch_size):
        chunk = coords[start:start + batch_size]
        res = forward(chunk, params, cfg, state, mode="eval", essentials=False)
        out.append(res.final_logits.astype(np.float64))
    return np.concatenate(out, axis=0)


def evaluate(ckpt: ModelCheckpoint, data: SceneBank, estimator="weighted", seed=0,
             batch_size=16):
    """Run the checkpoint on ``data`` and score it."""
    logits = predict_logits(ckpt, data.coords, batch_size, labels=data.labels)
    return evaluate_logits(logits, data, estimator, seed)


def label_oracle():
    """Checkpoint whose logits come from the ground-truth labels."""
    return ModelCheckpoint(ModelConfig(predictor="label_oracle"), {}, {})


def untrained(model_cfg: ModelConfig, seed=0):
    """A checkpoint holding freshly initialised parameters."""
    params, state = init_params(model_cfg, seed)
    return ModelCheckpoint(model_cfg, params, state, replace(TrainConfig(), seed=seed))


def cumulative_curve(errors, thresholds=AUC_THRESHOLDS):
    """Two-column ``(error, recall)`` table of the cumulative pose-error curve."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(errors)
    finite = errors[np.isfinite(errors)]
    end = max(max(thresholds), finite[-1] if finite.size else 0.0)
    xs = np.concatenate([[0.0], finite, [end]])
    ys = np.concatenate([[0.0], np.arange(1, len(finite) + 1) / n, [len(finite) / n]])
    return np.column_stack([xs, ys])


def as_bank(corrs):
    """Accept a SceneBank or a list of labelled CorrespondenceSets."""
    if isinstance(corrs, SceneBank):
        return corrs
    if isinstance(corrs, CorrespondenceSet):
        corrs = [corrs]
    return SceneBank.from_correspondences(corrs)
