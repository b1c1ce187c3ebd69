"""Divergences between finite distributions and task-separation constants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .exceptions import ValidationError
from .latent_model import TaskFamily

DIST_TOL = 1e-10


class Divergence(str, Enum):
    KL = "kl"
    TV = "tv"
    HELLINGER_SQ = "hellinger_sq"
    CHI_SQ = "chi_sq"


def as_distribution(p, tol: float = DIST_TOL) -> np.ndarray:
    """Validate ``p`` as a probability vector and return it as a float array."""
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("distribution entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"distribution sums to {p.sum():.15g}")
    return p


def kl(p, q) -> float:
    """``sum p log(p/q)`` with ``0 log 0 = 0``; ``+inf`` if ``q`` misses mass of ``p``."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    s = p > 0
    if np.any(q[s] <= 0):
        return float("inf")
    return float(np.sum(p[s] * (np.log(p[s]) - np.log(q[s]))))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def hellinger_sq(p, q) -> float:
    """Squared Hellinger distance ``1 - sum sqrt(p q)``, in ``[0, 1]``."""
    bc = float(np.sqrt(np.asarray(p, float) * np.asarray(q, float)).sum())
    return min(1.0, max(0.0, 1.0 - bc))


def chi_sq(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    s = (p > 0) | (q > 0)
    if np.any(q[s] <= 0):
        return float("inf")
    return float(np.sum((p[s] - q[s]) ** 2 / q[s]))


_DIVERGENCES = {
    Divergence.KL: kl,
    Divergence.TV: total_variation,
    Divergence.HELLINGER_SQ: hellinger_sq,
    Divergence.CHI_SQ: chi_sq,
}


def divergence(kind: Divergence | str, p, q) -> float:
    """Divergence ``kind`` between validated distributions ``p`` and ``q``."""
    p, q = as_distribution(p), as_distribution(q)
    if p.shape != q.shape:
        raise ValidationError(f"support sizes differ: {p.size} vs {q.size}")
    return _DIVERGENCES[Divergence(kind)](p, q)


def prefix_law(task, h: int) -> np.ndarray:
    """Flattened law of ``z_{0:h}`` under ``task``."""
    joint = task.joint()
    return joint.sum(axis=tuple(range(h + 1, joint.ndim))).ravel()


def trajectory_law(task) -> np.ndarray:
    return task.joint().ravel()


def equivalence_classes(family: TaskFamily, tol: float = 1e-9) -> list[list[int]]:
    """Partition tasks whose answer marginals agree within ``tol`` (sup norm).

    The relation is closed transitively.  Classes are sorted by smallest member.
    """
    mats = [t.answer_matrix() for t in family.tasks]
    parent = list(range(len(mats)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            if np.max(np.abs(mats[i] - mats[j])) <= tol:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(len(mats)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def class_of(classes: list[list[int]], theta: int) -> list[int]:
    return next(c for c in classes if theta in c)


def separation_lambda(family: TaskFamily, theta_star: int, tol: float = 1e-9) -> float:
    """Min squared Hellinger between trajectory laws of ``theta_star`` and non-equivalent tasks."""
    theta_star = family.index(theta_star)
    same = set(class_of(equivalence_classes(family, tol), theta_star))
    ref = trajectory_law(family[theta_star])
    vals = [hellinger_sq(ref, trajectory_law(t)) for i, t in enumerate(family.tasks) if i not in same]
    return min(vals) if vals else float("inf")


def separation_per_step(family: TaskFamily, theta_star: int) -> list[float]:
    """``lambda_h`` for ``h = 1..H``: min squared Hellinger of prefix laws over all other tasks."""
    theta_star = family.index(theta_star)
    others = [t for i, t in enumerate(family.tasks) if i != theta_star]
    out = []
    for h in range(1, family.horizon + 1):
        ref = prefix_law(family[theta_star], h)
        vals = [hellinger_sq(ref, prefix_law(t, h)) for t in others]
        out.append(min(vals) if vals else float("inf"))
    return out


def mode_gap(p) -> tuple[int, float]:
    """Mode (smallest index on ties) and the gap to the runner-up."""
    p = np.asarray(p, float)
    mode = int(np.argmax(p))
    if p.size == 1:
        return mode, float(p[0])
    rest = np.delete(p, mode)
    return mode, float(p[mode] - rest.max())


def _max_log_ratio(p: np.ndarray, q: np.ndarray) -> float:
    sp, sq = p > 0, q > 0
    if np.any(sp != sq):
        return float("inf")
    if not np.any(sp):
        return 0.0
    return float(np.max(np.abs(np.log(p[sp]) - np.log(q[sq]))))


def query_shift_kappa(query_law, family: TaskFamily, theta_star: int) -> float:
    """``max_z mu(z) / P(z_0 = z | theta_star)`` for a test-query law ``mu``.

    Equals 1 when queries follow the task's own initial law; ``inf`` when
    ``mu`` puts mass where ``theta_star`` has none.
    """
    mu = as_distribution(query_law)
    init = family[family.index(theta_star)].initial
    if mu.size != init.size:
        raise ValidationError(f"query law has {mu.size} entries, alphabet has {init.size}")
    s = mu > 0
    if np.any(init[s] == 0):
        return float("inf")
    return float(np.max(mu[s] / init[s]))


def closeness_constants(family: TaskFamily, classes: list[list[int]] | None = None) -> tuple[float, float]:
    """``(alpha, alpha0)``: worst in-class log-ratio of trajectory and ``z_0`` laws.

    A trajectory with positive mass under exactly one of a pair gives ``+inf``.
    """
    if classes is None:
        classes = equivalence_classes(family)
    alpha = alpha0 = 0.0
    for cls in classes:
        for a in range(len(cls)):
            for b in range(a + 1, len(cls)):
                ta, tb = family[cls[a]], family[cls[b]]
                alpha = max(alpha, _max_log_ratio(trajectory_law(ta), trajectory_law(tb)))
                alpha0 = max(alpha0, _max_log_ratio(ta.initial, tb.initial))
    return alpha, alpha0


@dataclass
class SeparationReport:
    classes: list[list[int]]
    lambda_: float
    lambda_per_step: list[float]
    alpha: float
    alpha0: float
    mode: int | None
    mode_gap: float | None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return {k: d[k] for k in ("classes", "lambda", "lambda_per_step", "alpha", "alpha0", "mode", "mode_gap")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def separation_report(family: TaskFamily, theta_star: int, query: int | None = None,
                      tol: float = 1e-9) -> SeparationReport:
    """Collect the separation constants for ``theta_star``.

    ``mode`` and ``mode_gap`` describe ``P(y | z_0 = query, theta_star)`` and are
    ``None`` when no query is given.
    """
    theta_star = family.index(theta_star)
    classes = equivalence_classes(family, tol)
    alpha, alpha0 = closeness_constants(family, classes)
    mode = gap = None
    if query is not None:
        mode, gap = mode_gap(family[theta_star].answer_matrix()[query])
    return SeparationReport(classes, separation_lambda(family, theta_star, tol),
                            separation_per_step(family, theta_star), alpha, alpha0, mode, gap)
