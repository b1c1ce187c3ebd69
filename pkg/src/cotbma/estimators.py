"""scikit-learn style wrappers over the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attention_bma import ridge_bma, softmax_attention
from .exceptions import ValidationError
from .inference import bma_predictive, posterior
from .latent_model import Prompt, TaskFamily, visible_steps


def check_trajectories(X, family: TaskFamily, n_cols: int) -> np.ndarray:
    """Validate an integer array of symbols with ``n_cols`` columns."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=0)
    if X.shape[1] != n_cols:
        raise ValidationError(f"expected {n_cols} columns, got {X.shape[1]}")
    if X.size and (X.min() < 0 or X.max() >= family.alphabet_size):
        raise ValidationError("symbol outside the alphabet")
    return X


class BMAPredictor(ClassifierMixin, BaseEstimator):
    """Bayes-optimal answer predictor for a fixed task family.

    ``fit`` takes demos as full trajectories (one row per demo) and keeps the
    steps in ``keep``; ``predict_proba`` takes one query ``z_0`` per row.
    """

    def __init__(self, family: TaskFamily | None = None, keep=None):
        self.family = family
        self.keep = keep

    def _visible(self):
        H = self.family.horizon
        return visible_steps(range(1, H) if self.keep is None else self.keep, H)

    def fit(self, X, y=None):
        if self.family is None:
            raise ValidationError("BMAPredictor needs a task family")
        X = check_trajectories(X, self.family, self.family.horizon + 1)
        vis = self._visible()
        self.demos_ = tuple(tuple(int(r[v]) for v in vis) for r in X)
        self.visible_ = vis
        self.classes_ = np.arange(self.family.alphabet_size)
        return self

    def _prompt(self, z0: int) -> Prompt:
        return Prompt(self.demos_, int(z0), self.family.horizon, self.visible_)

    def predict_proba(self, X):
        check_is_fitted(self, "demos_")
        X = check_trajectories(np.asarray(X).reshape(-1, 1), self.family, 1)
        return np.stack([bma_predictive(self.family, self._prompt(z0)) for z0 in X[:, 0]])

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def posterior(self, z0: int) -> np.ndarray:
        check_is_fitted(self, "demos_")
        return posterior(self.family, self._prompt(z0))


class RidgeBMARegressor(RegressorMixin, BaseEstimator):
    """Kernel-form ridge estimate ``V^T (Phi Phi^T + ridge I)^{-1} Phi q``."""

    def __init__(self, ridge: float = 1.0):
        self.ridge = ridge

    def fit(self, X, y):
        self.X_ = check_array(X)
        self.y_ = check_array(y, ensure_2d=False)
        if len(self.X_) != len(self.y_):
            raise ValidationError("X and y have different lengths")
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X)
        return np.stack([ridge_bma(self.X_, self.y_, q, self.ridge).estimate for q in X])


class SoftmaxAttentionRegressor(RegressorMixin, BaseEstimator):
    """One-head softmax attention over stored keys and values."""

    def __init__(self, temperature: float = 1.0):
        self.temperature = temperature

    def fit(self, X, y):
        self.X_ = check_array(X)
        self.y_ = check_array(y, ensure_2d=False)
        if len(self.X_) != len(self.y_):
            raise ValidationError("X and y have different lengths")
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X)
        return np.stack([softmax_attention(q / self.temperature, self.X_, self.y_) for q in X])
