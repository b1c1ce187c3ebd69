"""Small reference task families used by tests, examples and the CLI defaults."""

from __future__ import annotations

import numpy as np

from .latent_model import MarkovTask, TabularTask, TaskFamily


def binary_chain(stay: float, horizon: int = 2, initial=(0.5, 0.5), name: str | None = None) -> MarkovTask:
    """Two-symbol homogeneous chain that repeats its symbol with prob ``stay``."""
    m = np.array([[stay, 1 - stay], [1 - stay, stay]])
    return MarkovTask.homogeneous(initial, m, horizon, name)


def chain(p01: float, p10: float, horizon: int = 2, initial=(0.5, 0.5), name: str | None = None) -> MarkovTask:
    """Two-symbol chain with ``P(1|0) = p01`` and ``P(0|1) = p10``."""
    m = np.array([[1 - p01, p01], [p10, 1 - p10]])
    return MarkovTask.homogeneous(initial, m, horizon, name)


def symmetric_pair() -> TaskFamily:
    """Tasks A (stay 0.9) and B (stay 0.1); equal answer marginals, different paths."""
    return TaskFamily([binary_chain(0.9, name="A"), binary_chain(0.1, name="B")], [0.5, 0.5])


def skewed_pair() -> TaskFamily:
    """A' and B': the chains of :func:`symmetric_pair` with skewed initial laws."""
    return TaskFamily([binary_chain(0.9, initial=(0.8, 0.2), name="A'"),
                       binary_chain(0.1, initial=(0.2, 0.8), name="B'")], [0.5, 0.5])


def decay_pair() -> TaskFamily:
    """A' against chain C; the default family for prompting-error decay runs."""
    return TaskFamily([binary_chain(0.9, initial=(0.8, 0.2), name="A'"),
                       chain(0.3, 0.6, name="C")], [0.5, 0.5])


def random_family(rng: np.random.Generator, n_tasks: int, alphabet_size: int, horizon: int,
                  tabular_share: float = 0.5, concentration: float = 1.0) -> TaskFamily:
    """Random Dirichlet family; each task is tabular with prob ``tabular_share``."""
    L = alphabet_size
    tasks = []
    for i in range(n_tasks):
        init = rng.dirichlet(np.full(L, concentration))
        if rng.random() < tabular_share:
            tables = [rng.dirichlet(np.full(L, concentration), size=(L,) * h) for h in range(1, horizon + 1)]
            tasks.append(TabularTask(init, tables, name=f"t{i}"))
        else:
            trans = rng.dirichlet(np.full(L, concentration), size=(horizon, L))
            tasks.append(MarkovTask(init, trans, name=f"t{i}"))
    prior = rng.dirichlet(np.full(n_tasks, 2.0))
    return TaskFamily(tasks, prior)


def tot_pair() -> TaskFamily:
    """Two inhomogeneous chains; from ``z_0 = 0`` the first has greedy step probs (0.6, 0.7)."""
    star = MarkovTask((0.5, 0.5), [[[0.6, 0.4], [0.3, 0.7]], [[0.7, 0.3], [0.2, 0.8]]], name="T*")
    other = MarkovTask((0.5, 0.5), [[[0.3, 0.7], [0.6, 0.4]], [[0.4, 0.6], [0.5, 0.5]]], name="T2")
    return TaskFamily([star, other], [0.5, 0.5])


def dominance_suite(seed: int = 20240, size: int = 20) -> list[tuple[TaskFamily, tuple[int, ...], tuple[int, ...], int]]:
    """Fixed nested-truncation cases ``(family, keep, keep_prime, n)`` with horizon 3."""
    rng = np.random.default_rng(seed)
    pairs = [((), (1,)), ((), (2,)), ((), (1, 2)), ((1,), (1, 2)), ((2,), (1, 2))]
    cases = []
    for i in range(size):
        fam = random_family(rng, n_tasks=2 + i % 2, alphabet_size=2 + (i // 10), horizon=3)
        keep, keep_prime = pairs[i % len(pairs)]
        cases.append((fam, keep, keep_prime, 1 + (i // 5) % 2))
    return cases
