"""Brute-force reference computations in linear probability space.

Nothing here reuses the log-space code paths of :mod:`cotbma.inference`; the
two routes are compared against each other in the tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .exceptions import CapacityError, ImpossiblePromptError, ValidationError
from .latent_model import Prompt, TaskFamily, TaskModel, visible_steps

STATE_CAP = 2**23


def _cond(task: TaskModel, prefix: tuple[int, ...]) -> list[float]:
    h = len(prefix)
    if h == 0:
        return [float(x) for x in task.initial]
    if task.kind == "markov":
        return [float(x) for x in task.transitions[h - 1][prefix[-1]]]
    return [float(x) for x in task.tables[h - 1][prefix]]


def trajectory_table(task: TaskModel) -> dict[tuple[int, ...], float]:
    """Probability of every trajectory, built by multiplying conditionals."""
    L, H = task.alphabet_size, task.horizon
    table = {}
    for traj in itertools.product(range(L), repeat=H + 1):
        p = 1.0
        for h in range(H + 1):
            p *= _cond(task, traj[:h])[traj[h]]
        table[traj] = p
    return table


def _visible_prob(table: dict, visible: Sequence[int], values: Sequence[int]) -> float:
    return math.fsum(p for t, p in table.items() if all(t[v] == x for v, x in zip(visible, values)))


def _check_states(family: TaskFamily, n: int, cap: int) -> None:
    L, H = family.alphabet_size, family.horizon
    states = len(family) * L ** ((n + 1) * (H + 1))
    if states > cap:
        raise CapacityError(f"joint enumeration needs {states} states, cap is {cap}")


def brute_force_posterior_predictive(family: TaskFamily, prompt: Prompt, cap: int = STATE_CAP) -> list[float]:
    """``P(y | prompt)`` by summing the joint of task, demos and test path."""
    _check_states(family, prompt.n, cap)
    H, L = family.horizon, family.alphabet_size
    num = [[] for _ in range(L)]
    for i, task in enumerate(family.tasks):
        table = trajectory_table(task)
        w = float(family.prior[i])
        for d in prompt.demos:
            w *= _visible_prob(table, prompt.visible, d)
        if w == 0.0:
            continue
        for y in range(L):
            num[y].append(w * _visible_prob(table, (0, H), (prompt.query, y)))
    joint = [math.fsum(v) for v in num]
    total = math.fsum(joint)
    if total == 0.0:
        raise ImpossiblePromptError("prompt has zero probability under every task")
    return [v / total for v in joint]


def brute_force_posterior(family: TaskFamily, prompt: Prompt, cap: int = STATE_CAP) -> list[float]:
    """``P(theta | prompt)`` including the test query, in linear space."""
    _check_states(family, prompt.n, cap)
    weights = []
    for i, task in enumerate(family.tasks):
        table = trajectory_table(task)
        w = float(family.prior[i]) * _visible_prob(table, (0,), (prompt.query,))
        for d in prompt.demos:
            w *= _visible_prob(table, prompt.visible, d)
        weights.append(w)
    total = math.fsum(weights)
    if total == 0.0:
        raise ImpossiblePromptError("prompt has zero probability under every task")
    return [w / total for w in weights]


@dataclass
class JointEnumeration:
    """Full joint over ``(task, demos, test trajectory)`` for tiny instances."""

    entries: dict[tuple, float]

    def total(self) -> float:
        return math.fsum(self.entries.values())


def enumerate_joint(family: TaskFamily, n: int, cap: int = STATE_CAP) -> JointEnumeration:
    _check_states(family, n, cap)
    entries = {}
    for i, task in enumerate(family.tasks):
        table = trajectory_table(task)
        for trajs in itertools.product(table, repeat=n + 1):
            p = float(family.prior[i])
            for t in trajs:
                p *= table[t]
            entries[(i, *trajs)] = p
    return JointEnumeration(entries)


def _kl(p: Sequence[float], q: Sequence[float]) -> float:
    terms = []
    for a, b in zip(p, q):
        if a > 0:
            if b <= 0:
                return math.inf
            terms.append(a * math.log(a / b))
    return math.fsum(terms)


def _prompt_laws(family: TaskFamily, visible: tuple[int, ...], n: int):
    """Yield ``(demos, query, per-task prob of demos+query, per-task answer rows)``."""
    L, H = family.alphabet_size, family.horizon
    tables = [trajectory_table(t) for t in family.tasks]
    vis_probs = [{v: _visible_prob(tb, visible, v) for v in itertools.product(range(L), repeat=len(visible))}
                 for tb in tables]
    answers = [{z0: [_visible_prob(tb, (0, H), (z0, y)) for y in range(L)] for z0 in range(L)} for tb in tables]
    for demos in itertools.product(vis_probs[0], repeat=n):
        for z0 in range(L):
            probs = []
            for i in range(len(family)):
                p = answers[i][z0]
                pz0 = math.fsum(p)
                w = pz0
                for d in demos:
                    w *= vis_probs[i][d]
                probs.append(w)
            rows = []
            for i in range(len(family)):
                a = answers[i][z0]
                s = math.fsum(a)
                rows.append([x / s for x in a] if s > 0 else None)
            yield demos, z0, probs, rows


def _predictive(prior, probs, rows) -> list[float] | None:
    weights = [float(pi) * p for pi, p in zip(prior, probs)]
    total = math.fsum(weights)
    if total == 0:
        return None
    L = len(next(r for r in rows if r is not None))
    return [math.fsum(w * r[y] for w, r in zip(weights, rows) if w > 0) / total for y in range(L)]


def _check_keep(family: TaskFamily, keep: Iterable[int]) -> tuple[int, ...]:
    return visible_steps(keep, family.horizon)


def expected_kl_exact(family: TaskFamily, keep: Iterable[int], n: int, theta: int | None = None,
                      cap: int = STATE_CAP) -> float:
    """Exact expected prompting error with demos kept at steps ``keep``.

    Averages over the prior when ``theta`` is ``None``, otherwise conditions
    on the true task ``theta``.
    """
    visible = _check_keep(family, keep)
    _check_states(family, n, cap)
    thetas = range(len(family)) if theta is None else [family.index(theta)]
    terms = []
    for demos, z0, probs, rows in _prompt_laws(family, visible, n):
        q = _predictive(family.prior, probs, rows)
        for t in thetas:
            w = probs[t] * (float(family.prior[t]) if theta is None else 1.0)
            if w > 0:
                terms.append(w * _kl(rows[t], q))
    return math.fsum(terms)


@dataclass
class DominanceResult:
    keep: tuple[int, ...]
    keep_prime: tuple[int, ...]
    n: int
    delta_kl: float
    identity_residual: float

    @property
    def ok(self) -> bool:
        return self.delta_kl >= -1e-10 and self.identity_residual <= 1e-9


def dominance_check(family: TaskFamily, keep: Iterable[int], keep_prime: Iterable[int], n: int,
                    cap: int = STATE_CAP) -> DominanceResult:
    """Compare expected errors of nested truncations ``keep`` within ``keep_prime``.

    ``delta_kl`` is the error drop from revealing more steps.  It must equal
    the expected KL between the richer and the poorer predictive, where the
    poorer prompt is the richer one with steps deleted; the gap is reported as
    ``identity_residual``.
    """
    keep, keep_prime = tuple(sorted(set(keep))), tuple(sorted(set(keep_prime)))
    if not set(keep) <= set(keep_prime):
        raise ValidationError(f"{keep} is not a subset of {keep_prime}")
    vis, vis_p = _check_keep(family, keep), _check_keep(family, keep_prime)
    e_small = expected_kl_exact(family, keep, n, cap=cap)
    e_big = expected_kl_exact(family, keep_prime, n, cap=cap)
    cols = [vis_p.index(v) for v in vis]
    small_cache: dict = {}
    for demos, z0, probs, rows in _prompt_laws(family, vis, n):
        small_cache[(demos, z0)] = _predictive(family.prior, probs, rows)
    terms = []
    for demos, z0, probs, rows in _prompt_laws(family, vis_p, n):
        mass = math.fsum(float(pi) * p for pi, p in zip(family.prior, probs))
        if mass == 0:
            continue
        q_big = _predictive(family.prior, probs, rows)
        q_small = small_cache[(tuple(tuple(d[c] for c in cols) for d in demos), z0)]
        terms.append(mass * _kl(q_big, q_small))
    identity = math.fsum(terms)
    delta = e_small - e_big
    return DominanceResult(keep, keep_prime, n, delta, abs(delta - identity))
