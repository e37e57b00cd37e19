"""scikit-learn style wrapper around the pruning network."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import training
from .checkpoint import ModelCheckpoint
from .model import ModelConfig, TrainConfig, inlier_probability
from .validation import (check_essentials, check_labels, check_positive_int, check_scenes,
                         essentials_of, labels_of)


class CorrespondencePruner(ClassifierMixin, BaseEstimator):
    """Per-correspondence inlier classifier.

    ``X`` holds scenes of putative matches: an ``(S, N, 4)`` array, a single
    ``(N, 4)`` scene, or a list of :class:`CorrespondenceSet`.  ``y`` holds
    0/1 labels of shape ``(S, N)``.  Predictions keep that per-scene shape.

    Ground-truth essential matrices enable the regression term of the loss;
    without them the network is trained on the classification term only.

    Parameters not listed explicitly can be passed through ``model_options``
    (extra :class:`ModelConfig` fields) and ``train_options`` (extra
    :class:`TrainConfig` fields).
    """

    def __init__(self, n_layers=4, d=128, n_state=16, k=9, groups=3, use_cslb=True,
                 use_lgpl=True, use_mamba=True, use_channel_aware=True, iterations=1000,
                 batch_size=32, lr=1e-3, beta=0.5, beta_warmup=500, dtype="float32",
                 random_state=0, model_options=None, train_options=None, eval_batch=16):
        self.n_layers = n_layers
        self.d = d
        self.n_state = n_state
        self.k = k
        self.groups = groups
        self.use_cslb = use_cslb
        self.use_lgpl = use_lgpl
        self.use_mamba = use_mamba
        self.use_channel_aware = use_channel_aware
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.beta = beta
        self.beta_warmup = beta_warmup
        self.dtype = dtype
        self.random_state = random_state
        self.model_options = model_options
        self.train_options = train_options
        self.eval_batch = eval_batch

    def _configs(self, with_regression):
        model_cfg = ModelConfig(n_layers=self.n_layers, d=self.d, n_state=self.n_state,
                                k=self.k, groups=self.groups, use_cslb=self.use_cslb,
                                use_lgpl=self.use_lgpl, use_mamba=self.use_mamba,
                                use_channel_aware=self.use_channel_aware, dtype=self.dtype,
                                **(self.model_options or {}))
        train_cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                                lr=self.lr, beta=self.beta if with_regression else 0.0,
                                beta_warmup=self.beta_warmup, seed=int(self.random_state),
                                checkpoint_every=max(1, self.iterations),
                                **(self.train_options or {}))
        return model_cfg, train_cfg

    def fit(self, X, y=None, essentials=None):
        """Train on labelled scenes.

        ``y`` and ``essentials`` default to the labels and matrices stored on
        CorrespondenceSet inputs.
        """
        check_positive_int(self.iterations, "iterations")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.eval_batch, "eval_batch")
        if y is None:
            y = labels_of(X)
            if y is None:
                raise ValueError("fit needs labels: pass y or labelled CorrespondenceSets")
        if essentials is None:
            essentials = essentials_of(X)
        coords = check_scenes(X)
        labels = check_labels(y, coords.shape[:2])
        if essentials is None:
            warnings.warn("no essential matrices given; training without the regression term",
                          UserWarning, stacklevel=2)
            E = np.zeros((len(coords), 3, 3))
        else:
            E = check_essentials(essentials, len(coords))
        model_cfg, train_cfg = self._configs(essentials is not None)
        S = len(coords)
        bank = training.SceneBank(coords, labels, E, np.broadcast_to(np.eye(3), (S, 3, 3)).copy(),
                                  np.zeros((S, 3)))
        result = training.train(train_cfg, model_cfg, bank)
        self.checkpoint_ = result.checkpoint
        self.training_log_ = result.metrics
        self.classes_ = np.array([0, 1])
        self.n_points_ = coords.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint):
        """Wrap a trained (or oracle) checkpoint without refitting."""
        m, t = ckpt.model_config, ckpt.train_config
        est = cls(n_layers=m.n_layers, d=m.d, n_state=m.n_state, k=m.k, groups=m.groups,
                  use_cslb=m.use_cslb, use_lgpl=m.use_lgpl, use_mamba=m.use_mamba,
                  use_channel_aware=m.use_channel_aware, iterations=t.iterations,
                  batch_size=t.batch_size, lr=t.lr, beta=t.beta, beta_warmup=t.beta_warmup,
                  dtype=m.dtype, random_state=t.seed)
        est.checkpoint_ = ckpt
        est.training_log_ = []
        est.classes_ = np.array([0, 1])
        return est

    def decision_function(self, X, y=None):
        """Final-layer logits ``o`` of shape (S, N); ``y`` is used only by the label oracle."""
        check_is_fitted(self, "checkpoint_")
        coords = check_scenes(X)
        if y is None:
            y = labels_of(X)
        labels = None if y is None else check_labels(y, coords.shape[:2])
        return training.predict_logits(self.checkpoint_, coords, self.eval_batch, labels=labels)

    def predict_proba(self, X, y=None):
        """Inlier probabilities in [0, 1), shape (S, N)."""
        return inlier_probability(self.decision_function(X, y))

    def predict(self, X, y=None):
        """0/1 inlier decisions at threshold ``o > 0``, shape (S, N)."""
        return (self.decision_function(X, y) > 0).astype(np.int8)

    def score(self, X, y, sample_weight=None):
        """Mean per-correspondence accuracy."""
        pred = self.predict(X)
        truth = check_labels(y, pred.shape)
        return float(np.average(pred == truth, weights=sample_weight))

    def evaluate(self, data, estimator="weighted", seed=0):
        """Classification metrics and pose AUC on labelled scenes with known pose."""
        check_is_fitted(self, "checkpoint_")
        return training.evaluate(self.checkpoint_, training.as_bank(data), estimator, seed,
                                 self.eval_batch)
