"""Estimator-style facade over the training loops.

The estimators follow the familiar fit/predict/score/get_params shape, with
one twist: every data-bearing call takes the graph first, because the models
are inductive (a fitted estimator can be applied to a different graph of the
same feature width). Hyperparameters mirror TrainConfig field names.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .graphs import Graph
from .training import (
    TrainConfig,
    _build_model,
    _fit,
    train_classify,
)

__all__ = ["GbnNodeClassifier", "GbnNodeRegressor"]


class _BaseEstimator:
    """Shared parameter plumbing: constructor kwargs are the search space."""

    _param_names = (
        "n_layers",
        "hid_dim",
        "activation",
        "dropout",
        "norm",
        "lr",
        "w_decay",
        "epochs",
        "seed",
        "patience",
        "model_kind",
    )

    def __init__(
        self,
        n_layers: int = 2,
        hid_dim: int = 64,
        activation: str = "tanh",
        dropout: float = 0.0,
        norm: str = "batch",
        lr: float = 1e-3,
        w_decay: float = 0.0,
        epochs: int = 200,
        seed: int = 0,
        patience: int = 100,
        model_kind: str = "gbn",
    ):
        self.n_layers = n_layers
        self.hid_dim = hid_dim
        self.activation = activation
        self.dropout = dropout
        self.norm = norm
        self.lr = lr
        self.w_decay = w_decay
        self.epochs = epochs
        self.seed = seed
        self.patience = patience
        self.model_kind = model_kind
        self.model_ = None
        self.report_ = None

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(f"unknown parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def _config(self, task: str) -> TrainConfig:
        return TrainConfig(
            task=task,
            n_layers=self.n_layers,
            hid_dim=self.hid_dim,
            activation=self.activation,
            dropout=self.dropout,
            norm=self.norm,
            lr=self.lr,
            w_decay=self.w_decay,
            epochs=self.epochs,
            seed=self.seed,
            patience=self.patience,
        )

    def _check_fitted(self):
        if self.model_ is None:
            raise RuntimeError(f"{type(self).__name__} is not fitted; call fit first")

    def _logits(self, g: Graph, X: np.ndarray) -> np.ndarray:
        self._check_fitted()
        out, _ = self.model_.forward(g, np.asarray(X, dtype=float))
        return out.values


class GbnNodeClassifier(_BaseEstimator):
    """Node classification with cross-entropy training and early stopping."""

    def fit(self, g: Graph, X: np.ndarray, y: np.ndarray, split: Optional[dict] = None):
        y = np.asarray(y)
        if split is None:
            rows = np.arange(g.n)
            split = {"train": rows, "val": rows, "test": rows}
        cfg = self._config("classification")
        self.report_ = train_classify(cfg, g, np.asarray(X, dtype=float), y, split, self.model_kind)
        self.model_ = self.report_.model
        self.classes_ = np.arange(int(y.max()) + 1)
        return self

    def predict_proba(self, g: Graph, X: np.ndarray) -> np.ndarray:
        logits = self._logits(g, X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def predict(self, g: Graph, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._logits(g, X), axis=1)

    def score(self, g: Graph, X: np.ndarray, y: np.ndarray, rows=None) -> float:
        pred = self.predict(g, X)
        y = np.asarray(y)
        if rows is not None:
            rows = np.asarray(rows)
            pred = pred[rows]
            y = y[rows]
        return float(np.mean(pred == y))


class GbnNodeRegressor(_BaseEstimator):
    """Per-node regression trained with full-graph MSE."""

    def fit(self, g: Graph, X: np.ndarray, y: np.ndarray):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        cfg = self._config("bottleneck")
        model = _build_model(self.model_kind, cfg, in_dim=X.shape[1], out_dim=y.shape[1])

        from . import rng as rngmod

        def train_loss(epoch: int) -> ad.Tensor:
            out, _ = model.forward(
                g, X, training=True, rng=rngmod.stream(cfg.seed, rngmod.DROPOUT, epoch)
            )
            return ad.mse(out, y)

        def evaluate():
            out, _ = model.forward(g, X)
            err = float(np.mean((out.values - y) ** 2))
            return err, err

        self.report_ = _fit(model, cfg, train_loss, evaluate, lower_is_better=True)
        self.report_.model = model
        self.model_ = model
        return self

    def predict(self, g: Graph, X: np.ndarray) -> np.ndarray:
        return self._logits(g, X)

    def score(self, g: Graph, X: np.ndarray, y: np.ndarray) -> float:
        """Coefficient of determination of the per-node predictions."""
        self._check_fitted()
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        pred = self.predict(g, X)
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
        if ss_tot == 0.0:
            return 0.0 if ss_res > 0 else 1.0
        return 1.0 - ss_res / ss_tot
