"""Softmax attention as a kernel estimate of the ridge/BMA predictor.

Symbols are embedded by a key map ``k`` and a unit-norm value map ``v``.  The
key of step ``h`` stacks ``k(z_0), ..., k(z_{h-1})`` into ``H`` blocks of
width ``d_k`` and zero-pads the rest.  Values follow a linear model
``v_h ~ theta* phi(key_h) + noise`` that is projected back onto the unit
sphere; the emitted symbol is the nearest value embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ValidationError

RESIDUAL_TOL = 1e-8


@dataclass
class FeatureMaps:
    key_embedding: np.ndarray  # (L, d_k)
    value_embedding: np.ndarray  # (L, d_v), unit rows
    horizon: int
    phi: str = "identity"
    relu_weights: np.ndarray | None = None

    @property
    def alphabet_size(self) -> int:
        return self.key_embedding.shape[0]

    @property
    def key_dim(self) -> int:
        return self.key_embedding.shape[1] * self.horizon

    @property
    def feature_dim(self) -> int:
        return self.key_dim if self.relu_weights is None else self.relu_weights.shape[0]

    def features(self, keys: np.ndarray) -> np.ndarray:
        if self.phi == "identity":
            return keys
        if self.phi == "relu":
            return np.maximum(keys @ self.relu_weights.T, 0.0)
        raise ValidationError(f"unknown feature map {self.phi!r}")

    def emit(self, values: np.ndarray) -> np.ndarray:
        """Nearest symbol for each unit value vector."""
        return np.argmax(values @ self.value_embedding.T, axis=-1)


def make_feature_maps(alphabet_size: int, d_k: int, d_v: int, horizon: int, rng: np.random.Generator,
                      key_scale: float = 3.0, phi: str = "identity", relu_dim: int = 64) -> FeatureMaps:
    """Random embeddings; keys are orthogonal with norm ``key_scale`` when ``L <= d_k``."""
    if alphabet_size <= d_k:
        q, _ = np.linalg.qr(rng.standard_normal((d_k, d_k)))
        keys = q[:alphabet_size] * key_scale
    else:
        keys = rng.standard_normal((alphabet_size, d_k))
        keys *= key_scale / np.linalg.norm(keys, axis=1, keepdims=True)
    vals = rng.standard_normal((alphabet_size, d_v))
    vals /= np.linalg.norm(vals, axis=1, keepdims=True)
    relu = rng.standard_normal((relu_dim, d_k * horizon)) / np.sqrt(d_k * horizon) if phi == "relu" else None
    return FeatureMaps(keys, vals, horizon, phi, relu)


def build_keys(maps: FeatureMaps, history: Sequence[int]) -> np.ndarray:
    """Key of the step after ``history = (z_0, ..., z_{h-1})``."""
    return build_keys_batch(maps, np.asarray(history, dtype=np.int64)[None])[0]


def build_keys_batch(maps: FeatureMaps, histories: np.ndarray) -> np.ndarray:
    m, h = histories.shape
    if not 1 <= h <= maps.horizon:
        raise ValidationError(f"history length {h} outside 1..{maps.horizon}")
    d = maps.key_embedding.shape[1]
    out = np.zeros((m, maps.key_dim))
    out[:, : h * d] = maps.key_embedding[histories].reshape(m, h * d)
    return out


def default_theta_star(maps: FeatureMaps, rng: np.random.Generator, first_block_only: bool = True) -> np.ndarray:
    """Random ``d_v x d_phi`` map scaled so that ``theta* phi(key)`` has norm near one.

    With ``first_block_only`` the value depends on ``z_0`` alone.  Zero-padded
    keys give a step-``h`` query the same score against every longer key that
    shares its prefix, so the attention limit and the linear limit agree only
    when later blocks leave the conditional mean unchanged.
    """
    d_v = maps.value_embedding.shape[1]
    scale = np.linalg.norm(maps.key_embedding, axis=1).mean()
    theta = rng.standard_normal((d_v, maps.feature_dim)) / (scale * np.sqrt(maps.key_embedding.shape[1]))
    if first_block_only and maps.phi == "identity":
        theta[:, maps.key_embedding.shape[1]:] = 0.0
    return theta


@dataclass
class LinearDataset:
    keys: np.ndarray  # (n * H, key_dim), demo-major then step
    values: np.ndarray  # (n * H, d_v), unit rows
    symbols: np.ndarray  # (n, H + 1)
    renorm_deviation: float

    @property
    def n(self) -> int:
        return self.symbols.shape[0]


def _roll(maps: FeatureMaps, theta_star: np.ndarray, sigma: float, rng: np.random.Generator,
          z0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n, H = len(z0), maps.horizon
    d_v = maps.value_embedding.shape[1]
    z = np.empty((n, H + 1), dtype=np.int64)
    z[:, 0] = z0
    keys = np.empty((n, H, maps.key_dim))
    vals = np.empty((n, H, d_v))
    dev = np.empty((n, H))
    for h in range(1, H + 1):
        k = build_keys_batch(maps, z[:, :h])
        mean = maps.features(k) @ theta_star.T
        raw = mean + sigma * rng.standard_normal((n, d_v))
        norm = np.linalg.norm(raw, axis=1)
        while np.any(norm == 0):
            bad = norm == 0
            raw[bad] = mean[bad] + sigma * rng.standard_normal((int(bad.sum()), d_v))
            norm = np.linalg.norm(raw, axis=1)
        v = raw / norm[:, None]
        keys[:, h - 1], vals[:, h - 1], dev[:, h - 1] = k, v, np.abs(norm - 1)
        z[:, h] = maps.emit(v)
    return z, keys, vals, dev


def simulate_linear_dataset(maps: FeatureMaps, theta_star: np.ndarray, sigma: float, n: int,
                            rng: np.random.Generator) -> LinearDataset:
    """Draw ``n`` demos; ``renorm_deviation`` is the mean of ``| ||raw value|| - 1 |``."""
    z0 = rng.integers(maps.alphabet_size, size=n)
    z, keys, vals, dev = _roll(maps, theta_star, sigma, rng, z0)
    return LinearDataset(keys.reshape(n * maps.horizon, -1), vals.reshape(n * maps.horizon, -1), z,
                         float(dev.mean()) if dev.size else 0.0)


@dataclass
class RidgeSolution:
    estimate: np.ndarray
    residual: float


def ridge_bma(features: np.ndarray, values: np.ndarray, query: np.ndarray, ridge: float) -> RidgeSolution:
    """``V^T (Phi Phi^T + ridge I)^{-1} Phi q`` with ``Phi`` the feature rows.

    When there are more rows than features the equivalent primal system
    ``(Phi^T Phi + ridge I) w = q`` is solved instead.  ``residual`` is the
    relative residual of whichever system was solved.
    """
    phi = np.asarray(features, float)
    q = np.asarray(query, float)
    values = np.asarray(values, float)
    m, d = phi.shape
    if d < m:
        gram = phi.T @ phi + ridge * np.eye(d)
        rhs = q
    else:
        gram = phi @ phi.T + ridge * np.eye(m)
        rhs = phi @ q
    coef = np.linalg.solve(gram, rhs)
    residual = float(np.linalg.norm(gram @ coef - rhs) / max(np.linalg.norm(rhs), 1e-300))
    est = values.T @ (phi @ coef) if d < m else values.T @ coef
    return RidgeSolution(est, residual)


def softmax_attention(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``sum_i softmax_i(<q, k_i>) v_i`` with a max-shift for stability."""
    logits = np.asarray(keys, float) @ np.asarray(query, float)
    w = np.exp(logits - logits.max())
    return (w / w.sum()) @ np.asarray(values, float)


@dataclass
class ConvergenceRow:
    n: int
    seed: int
    C: float
    max_err: float
    renorm_dev: float
    residual: float


def convergence_experiment(maps: FeatureMaps, theta_star: np.ndarray, n_grid: Sequence[int], sigma: float,
                           seed: int, test_path: Sequence[int] | None = None,
                           rng: np.random.Generator | None = None) -> list[ConvergenceRow]:
    """Compare ridge/BMA and attention at every step of one test path.

    The ridge is ``sigma^2 n^{2/3}``.  ``C`` is the least-squares factor
    between the two estimates on the largest ``n``; every row reports
    ``max_h || ridge_h - C attention_h ||`` with that shared factor.
    """
    n_grid = sorted(int(n) for n in n_grid)
    rng = np.random.default_rng(seed) if rng is None else rng
    if test_path is None:
        z0 = rng.integers(maps.alphabet_size, size=1)
        test_path = _roll(maps, theta_star, sigma, rng, z0)[0][0]
    test_path = np.asarray(test_path, dtype=np.int64)
    runs = []
    for n in n_grid:
        data = simulate_linear_dataset(maps, theta_star, sigma, n, rng)
        phi = maps.features(data.keys)
        ridge_est, attn_est, resid = [], [], 0.0
        for h in range(1, maps.horizon + 1):
            q = maps.features(build_keys(maps, test_path[:h]))
            sol = ridge_bma(phi, data.values, q, sigma**2 * n ** (2 / 3))
            ridge_est.append(sol.estimate)
            attn_est.append(softmax_attention(q, phi, data.values))
            resid = max(resid, sol.residual)
        runs.append((n, np.array(ridge_est), np.array(attn_est), data.renorm_deviation, resid))
    _, r_big, a_big, _, _ = runs[-1]
    denom = float(np.sum(a_big * a_big))
    C = float(np.sum(r_big * a_big) / denom) if denom > 0 else 0.0
    rows = []
    for n, r, a, dev, resid in runs:
        err = float(np.max(np.linalg.norm(r - C * a, axis=1)))
        rows.append(ConvergenceRow(n, seed, C, err, dev, resid))
    return rows
