"""Exact Bayesian inference over a task family given a prompt.

All likelihoods are accumulated in log space and normalised with
log-sum-exp.  The predictive of a prompt is the posterior-weighted mixture of
per-task answer marginals.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .exceptions import ImpossiblePromptError, ValidationError
from .latent_model import Prompt, TaskFamily, TaskModel, _log, sample_trajectories

GROUP_TOL = 1e-12


def answer_marginal(task: TaskModel, z0: int) -> np.ndarray:
    """``P(y | z_0, task)`` with every hidden step summed out."""
    return task.answer_matrix()[int(z0)].copy()


def _path_loglik(task: TaskModel, path: np.ndarray) -> float:
    out = 0.0
    for h in range(1, len(path)):
        p = task.step_rows(h, path[None, :h])[0, path[h]]
        if p <= 0:
            return -np.inf
        out += np.log(p)
    return out


def log_weights(family: TaskFamily, prompt: Prompt, prefix: Sequence[int] = ()) -> np.ndarray:
    """Unnormalised log posterior of every task.

    ``prefix`` holds already generated test steps ``z_1..z_{h-1}``.
    """
    if prompt.horizon != family.horizon:
        raise ValidationError("prompt horizon does not match the family")
    if not 0 <= prompt.query < family.alphabet_size:
        raise ValidationError(f"query {prompt.query} outside the alphabet")
    demos = prompt.demo_array()
    path = np.array([prompt.query, *prefix], dtype=np.int64)
    lw = family.log_prior.copy()
    for i, task in enumerate(family.tasks):
        if lw[i] == -np.inf:
            continue
        if prompt.n:
            lw[i] += task.visible_log_likelihood(prompt.visible, demos).sum()
        lw[i] += _log(task.initial[prompt.query])
        if len(path) > 1 and lw[i] > -np.inf:
            lw[i] += _path_loglik(task, path)
    return lw


def logsumexp(lw: np.ndarray) -> float:
    m = np.max(lw)
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.sum(np.exp(lw - m))))


def _normalise(lw: np.ndarray) -> np.ndarray:
    if not np.any(np.isfinite(lw)):
        raise ImpossiblePromptError("every task assigns probability zero to the prompt")
    return np.exp(lw - logsumexp(lw))


def posterior(family: TaskFamily, prompt: Prompt, prefix: Sequence[int] = ()) -> np.ndarray:
    """Posterior over tasks given the prompt and an optional partial test path."""
    return _normalise(log_weights(family, prompt, prefix))


def _grouped_weights(lw: np.ndarray, rows: np.ndarray, anchor: int | None = None):
    # Tasks with identical rows are pooled first, so a prompt that cannot
    # distinguish them yields exactly that row rather than a rounded copy.
    order = list(range(len(rows)))
    if anchor is not None:
        order.remove(anchor)
        order.insert(0, anchor)
    reps: list[int] = []
    members: list[list[int]] = []
    for i in order:
        for g, r in enumerate(reps):
            if np.max(np.abs(rows[i] - rows[r])) <= GROUP_TOL:
                members[g].append(i)
                break
        else:
            reps.append(i)
            members.append([i])
    glw = np.array([logsumexp(lw[m]) for m in members])
    return _normalise(glw), reps


def _mixture(lw: np.ndarray, rows: np.ndarray, anchor: int | None = None) -> np.ndarray:
    gw, reps = _grouped_weights(lw, rows, anchor)
    out = np.zeros(rows.shape[1])
    for w, r in zip(gw, reps):
        if w > 0:
            out += w * rows[r]
    return out


def step_predictive(family: TaskFamily, prompt: Prompt, prefix: Sequence[int] = ()) -> np.ndarray:
    """Law of test step ``h = len(prefix) + 1`` given prompt and ``z_1..z_{h-1}``."""
    h = len(prefix) + 1
    if h > family.horizon:
        raise ValidationError(f"prefix of length {len(prefix)} leaves no step to predict")
    lw = log_weights(family, prompt, prefix)
    path = np.array([prompt.query, *prefix], dtype=np.int64)[None]
    rows = np.stack([t.step_rows(h, path)[0] for t in family.tasks])
    return _mixture(lw, rows)


def bma_predictive(family: TaskFamily, prompt: Prompt, anchor: int | None = None) -> np.ndarray:
    """Posterior-weighted mixture of ``P(y | z_0, theta)`` over the family.

    ``anchor`` picks which member represents a group of tasks with identical
    answer rows; it never changes the result by more than rounding.
    """
    lw = log_weights(family, prompt)
    rows = np.stack([t.answer_matrix()[prompt.query] for t in family.tasks])
    return _mixture(lw, rows, anchor)


def truncated_predictive(family: TaskFamily, prompt: Prompt, keep: Iterable[int] | None = None) -> np.ndarray:
    """Predictive of the prompt with demos restricted to steps ``{0} + keep + {H}``."""
    if keep is not None:
        prompt = prompt.with_keep(keep)
    return bma_predictive(family, prompt)


def prompting_error(family: TaskFamily, theta_star: int, prompt: Prompt) -> float:
    """``KL(P(y | z_0, theta_star) || predictive)`` for the prompt's query."""
    theta_star = family.index(theta_star)
    lw = log_weights(family, prompt)
    rows = np.stack([t.answer_matrix()[prompt.query] for t in family.tasks])
    gw, reps = _grouped_weights(lw, rows, anchor=theta_star)
    p = rows[theta_star]
    # q - p summed directly keeps precision once the posterior has concentrated.
    delta = np.zeros_like(p)
    for w, r in zip(gw[1:], reps[1:]):
        if w > 0:
            delta += w * (rows[r] - p)
    s = p > 0
    with np.errstate(divide="ignore"):
        val = -np.sum(p[s] * np.log1p(delta[s] / p[s]))
    return max(float(val), 0.0)


def sample_cot_path(family: TaskFamily, prompt: Prompt, rng: np.random.Generator) -> tuple[int, ...]:
    """Generate ``z_0..z_H`` one step at a time from :func:`step_predictive`."""
    path: list[int] = []
    for _ in range(family.horizon):
        p = step_predictive(family, prompt, path)
        path.append(int(rng.choice(len(p), p=p / p.sum())))
    return (prompt.query, *path)


def sample_cot_paths(family: TaskFamily, prompt: Prompt, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` test paths, shape ``(size, H + 1)``.

    Chaining :func:`step_predictive` has the same law as drawing a task from
    the posterior and then a path from that task, which is what this does.
    """
    w = posterior(family, prompt)
    counts = rng.multinomial(size, w / w.sum())
    parts = [sample_trajectories(family[i], rng, int(c), prompt.query) for i, c in enumerate(counts) if c]
    out = np.concatenate(parts) if parts else np.empty((0, family.horizon + 1), dtype=np.int64)
    return out[rng.permutation(len(out))]
