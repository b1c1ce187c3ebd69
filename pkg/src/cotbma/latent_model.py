"""Finite multi-step latent-task model.

A task draws an initial symbol ``z_0`` and then ``z_1, ..., z_H`` one step at a
time; the last symbol is the answer.  Two task kinds are supported: Markov
tasks, whose step-``h`` conditional depends only on ``z_{h-1}``, and tabular
tasks, which condition on the whole prefix.  A :class:`TaskFamily` pairs a
finite set of tasks with a prior.

Demonstrations may be truncated.  A prompt stores, for every demo, only the
symbols at its ``visible`` step indices (always including step 0), and the
likelihood of such a demo marginalises every hidden step.
"""

from __future__ import annotations

import itertools
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import CapacityError, ValidationError

ROW_TOL = 1e-12
ENUM_CAP = 10**7


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _check_cap(n_states: int, cap: int, what: str) -> None:
    if n_states > cap:
        raise CapacityError(f"{what} needs {n_states} states, cap is {cap}")


def visible_steps(keep: Iterable[int], horizon: int) -> tuple[int, ...]:
    """Observed step indices of a demo that keeps intermediate steps ``keep``."""
    keep = sorted(set(int(j) for j in keep))
    for j in keep:
        if not 1 <= j <= horizon - 1:
            raise ValidationError(f"keep index {j} outside 1..{horizon - 1}")
    return (0, *keep, horizon) if horizon > 0 else (0,)


def _check_visible(visible: Sequence[int], horizon: int) -> tuple[int, ...]:
    vis = tuple(int(v) for v in visible)
    if not vis or vis[0] != 0:
        raise ValidationError("visible steps must start with step 0")
    if any(b <= a for a, b in zip(vis, vis[1:])):
        raise ValidationError(f"visible steps {vis} are not strictly increasing")
    if vis[-1] > horizon:
        raise ValidationError(f"visible step {vis[-1]} exceeds horizon {horizon}")
    return vis


class TaskModel(ABC):
    """One latent task: an initial law plus per-step conditionals."""

    kind: str

    def __init__(self, initial: Sequence[float], name: str | None = None):
        self.initial = np.asarray(initial, dtype=float)
        if self.initial.ndim != 1:
            raise ValidationError("initial distribution must be a vector")
        self.name = name
        self._cache: dict = {}

    @property
    def alphabet_size(self) -> int:
        return self.initial.shape[0]

    @property
    @abstractmethod
    def horizon(self) -> int: ...

    @abstractmethod
    def step_rows(self, h: int, prefixes: np.ndarray) -> np.ndarray:
        """Conditionals of ``z_h`` for a batch of prefixes of shape ``(m, h)``."""

    @abstractmethod
    def iter_rows(self) -> Iterator[tuple[int, tuple[int, ...], np.ndarray]]:
        """Yield ``(step, conditioning_key, row)`` for every stored distribution."""

    @abstractmethod
    def _visible_loglik(self, vis: tuple[int, ...], values: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def to_dict(self) -> dict: ...

    def step_distribution(self, h: int, history: Sequence[int]) -> np.ndarray:
        """Law of ``z_h`` given ``z_{0:h-1}``; ``h = 0`` returns the initial law."""
        if h == 0:
            return self.initial.copy()
        if not 1 <= h <= self.horizon:
            raise ValidationError(f"step {h} outside 0..{self.horizon}")
        if len(history) != h:
            raise ValidationError(f"step {h} needs a history of length {h}, got {len(history)}")
        return self.step_rows(h, np.asarray(history, dtype=np.int64)[None, :])[0]

    def joint(self, cap: int = ENUM_CAP) -> np.ndarray:
        """Trajectory law as an array of shape ``(L,) * (H + 1)``."""
        if "joint" not in self._cache:
            L, H = self.alphabet_size, self.horizon
            _check_cap(L ** (H + 1), cap, "trajectory enumeration")
            law = self.initial.copy()
            for h in range(1, H + 1):
                prefixes = np.array(list(itertools.product(range(L), repeat=h)), dtype=np.int64)
                rows = self.step_rows(h, prefixes).reshape((L,) * h + (L,))
                law = law[..., None] * rows
            self._cache["joint"] = law
        return self._cache["joint"]

    def answer_matrix(self) -> np.ndarray:
        """``M[z0, y] = P(z_H = y | z_0, task)`` for every ``z0`` in the alphabet."""
        if "answer" not in self._cache:
            self._cache["answer"] = self._answer_matrix()
        return self._cache["answer"]

    def _answer_matrix(self) -> np.ndarray:
        L, H = self.alphabet_size, self.horizon
        if H == 0:
            return np.eye(L)
        out = np.zeros((L, L))
        for z0 in range(L):
            law = np.ones(1)
            for h in range(1, H + 1):
                prefixes = np.array(
                    [(z0, *rest) for rest in itertools.product(range(L), repeat=h - 1)],
                    dtype=np.int64,
                )
                rows = self.step_rows(h, prefixes)
                law = (law[:, None] * rows).reshape(-1)
            out[z0] = law.reshape(-1, L).sum(axis=0)
        return out

    def visible_log_likelihood(self, visible: Sequence[int], values: np.ndarray) -> np.ndarray:
        """Log-probability of each row of ``values`` observed at steps ``visible``.

        Hidden steps are summed out.  Returns ``-inf`` where the probability is 0.
        """
        vis = _check_visible(visible, self.horizon)
        values = np.asarray(values, dtype=np.int64)
        if values.ndim == 1:
            values = values[None, :]
        if values.shape[1] != len(vis):
            raise ValidationError(f"expected {len(vis)} visible symbols, got {values.shape[1]}")
        if values.size and (values.min() < 0 or values.max() >= self.alphabet_size):
            raise ValidationError("symbol outside the alphabet")
        return self._visible_loglik(vis, values)


class MarkovTask(TaskModel):
    """Task whose step-``h`` conditional is row ``z_{h-1}`` of matrix ``T_h``."""

    kind = "markov"

    def __init__(self, initial, transitions, name: str | None = None):
        super().__init__(initial, name)
        self.transitions = np.asarray(transitions, dtype=float)
        L = self.alphabet_size
        if self.transitions.ndim == 2:
            self.transitions = self.transitions[None]
        if self.transitions.ndim != 3 or self.transitions.shape[1:] != (L, L):
            raise ValidationError(f"transitions must have shape (H, {L}, {L})")

    @classmethod
    def homogeneous(cls, initial, matrix, horizon: int, name: str | None = None) -> "MarkovTask":
        return cls(initial, np.repeat(np.asarray(matrix, float)[None], horizon, axis=0), name)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    def step_rows(self, h, prefixes):
        return self.transitions[h - 1][prefixes[:, h - 1]]

    def iter_rows(self):
        yield 0, (), self.initial
        for h in range(1, self.horizon + 1):
            for r in range(self.alphabet_size):
                yield h, (r,), self.transitions[h - 1, r]

    def _segment(self, a: int, b: int) -> np.ndarray:
        key = ("segment", a, b)
        if key not in self._cache:
            m = np.eye(self.alphabet_size)
            for h in range(a + 1, b + 1):
                m = m @ self.transitions[h - 1]
            self._cache[key] = _log(m)
        return self._cache[key]

    def _visible_loglik(self, vis, values):
        out = _log(self.initial)[values[:, 0]]
        for k in range(len(vis) - 1):
            out = out + self._segment(vis[k], vis[k + 1])[values[:, k], values[:, k + 1]]
        return out

    def _answer_matrix(self):
        m = np.eye(self.alphabet_size)
        for t in self.transitions:
            m = m @ t
        return m

    def to_dict(self):
        d = {"kind": self.kind, "initial": self.initial.tolist(), "transitions": self.transitions.tolist()}
        if self.name is not None:
            d["name"] = self.name
        return d


class TabularTask(TaskModel):
    """Task keyed by the full history prefix.

    ``tables[h - 1]`` has shape ``(L,) * h + (L,)`` and holds
    ``P(z_h | z_0, ..., z_{h-1})``.
    """

    kind = "tabular"

    def __init__(self, initial, tables, name: str | None = None):
        super().__init__(initial, name)
        L = self.alphabet_size
        self.tables = [np.asarray(t, dtype=float) for t in tables]
        for h, t in enumerate(self.tables, start=1):
            if t.shape != (L,) * (h + 1):
                raise ValidationError(f"table for step {h} must have shape {(L,) * (h + 1)}, got {t.shape}")

    @property
    def horizon(self) -> int:
        return len(self.tables)

    def step_rows(self, h, prefixes):
        return self.tables[h - 1][tuple(prefixes[:, :h].T)]

    def iter_rows(self):
        yield 0, (), self.initial
        L = self.alphabet_size
        for h, t in enumerate(self.tables, start=1):
            for key in itertools.product(range(L), repeat=h):
                yield h, key, t[key]

    def _visible_loglik(self, vis, values):
        key = ("visible", vis)
        if key not in self._cache:
            hidden = tuple(h for h in range(self.horizon + 1) if h not in vis)
            self._cache[key] = _log(self.joint().sum(axis=hidden))
        return self._cache[key][tuple(values.T)]

    def to_dict(self):
        d = {"kind": self.kind, "initial": self.initial.tolist(), "tables": [t.tolist() for t in self.tables]}
        if self.name is not None:
            d["name"] = self.name
        return d


def task_from_dict(d: dict) -> TaskModel:
    kind = d.get("kind")
    if kind == "markov":
        return MarkovTask(d["initial"], d["transitions"], d.get("name"))
    if kind == "tabular":
        return TabularTask(d["initial"], d["tables"], d.get("name"))
    raise ValidationError(f"unknown task kind {kind!r}")


@dataclass
class FamilyDiagnostics:
    """Outcome of :func:`validate_family`."""

    max_row_error: float
    min_entry: float
    floor_violations: list[str] = field(default_factory=list)

    @property
    def floor_ok(self) -> bool:
        return not self.floor_violations


def validate_family(family: "TaskFamily", floor: float | None = None, tol: float = ROW_TOL) -> FamilyDiagnostics:
    """Check every distribution of every task and the prior.

    Normalisation or sign errors raise :class:`ValidationError` naming the
    offending ``(task, step, row)``.  Entries below ``floor`` are only flagged.
    """
    problems: list[str] = []
    prior = family.prior
    if prior.shape != (len(family.tasks),):
        problems.append(f"prior has {prior.size} entries for {len(family.tasks)} tasks")
    elif np.any(prior < 0) or abs(prior.sum() - 1.0) > tol:
        problems.append(f"prior sums to {prior.sum():.15g}")
    if not family.tasks:
        problems.append("family has no tasks")
    L = family.tasks[0].alphabet_size if family.tasks else 0
    H = family.tasks[0].horizon if family.tasks else 0
    worst, lowest, flagged = 0.0, 1.0, []
    for i, task in enumerate(family.tasks):
        label = f"task {i} ({family.names[i]})"
        if task.alphabet_size != L or task.horizon != H:
            problems.append(f"{label}: shape (L={task.alphabet_size}, H={task.horizon}) != (L={L}, H={H})")
            continue
        for step, key, row in task.iter_rows():
            err = abs(float(row.sum()) - 1.0)
            worst = max(worst, err)
            lowest = min(lowest, float(row.min()))
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                problems.append(f"{label}, step {step}, row {key}: negative or non-finite entry")
            elif err > tol:
                problems.append(f"{label}, step {step}, row {key}: sums to {row.sum():.15g}")
            if floor is not None and np.any(row[row > 0] < floor):
                flagged.append(f"{label}, step {step}, row {key}: entry below floor {floor}")
    if problems:
        raise ValidationError("invalid task family: " + "; ".join(problems))
    return FamilyDiagnostics(worst, lowest, flagged)


class TaskFamily:
    """Finite task set with a prior; the tasks share alphabet and horizon."""

    def __init__(self, tasks: Sequence[TaskModel], prior: Sequence[float] | None = None,
                 names: Sequence[str] | None = None, validate: bool = True):
        self.tasks = tuple(tasks)
        n = len(self.tasks)
        self.prior = np.full(n, 1.0 / n) if prior is None else np.asarray(prior, dtype=float)
        if names is None:
            names = [t.name if t.name is not None else f"task{i}" for i, t in enumerate(self.tasks)]
        self.names = tuple(names)
        if validate:
            validate_family(self)

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> TaskModel:
        return self.tasks[i]

    @property
    def alphabet_size(self) -> int:
        return self.tasks[0].alphabet_size

    @property
    def horizon(self) -> int:
        return self.tasks[0].horizon

    @property
    def log_prior(self) -> np.ndarray:
        return _log(self.prior)

    def index(self, theta: int | str) -> int:
        if isinstance(theta, str):
            try:
                return self.names.index(theta)
            except ValueError:
                raise ValidationError(f"unknown task {theta!r}") from None
        if not 0 <= int(theta) < len(self):
            raise ValidationError(f"task index {theta} out of range")
        return int(theta)

    def subset(self, ids: Sequence[int], renormalise: bool = True) -> "TaskFamily":
        prior = self.prior[list(ids)]
        if renormalise:
            prior = prior / prior.sum()
        return TaskFamily([self.tasks[i] for i in ids], prior, [self.names[i] for i in ids])

    def to_dict(self) -> dict:
        tasks = []
        for name, t in zip(self.names, self.tasks):
            d = t.to_dict()
            d["name"] = name
            tasks.append(d)
        return {"alphabet_size": self.alphabet_size, "horizon": self.horizon,
                "prior": self.prior.tolist(), "tasks": tasks}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskFamily":
        try:
            tasks = [task_from_dict(t) for t in d["tasks"]]
            fam = cls(tasks, d.get("prior"), validate=False)
        except KeyError as exc:
            raise ValidationError(f"task family missing key {exc}") from None
        if "alphabet_size" in d and fam.alphabet_size != d["alphabet_size"]:
            raise ValidationError("alphabet_size does not match the task tables")
        if "horizon" in d and fam.horizon != d["horizon"]:
            raise ValidationError("horizon does not match the task tables")
        validate_family(fam)
        return fam

    @classmethod
    def load(cls, path: str | Path) -> "TaskFamily":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class Prompt:
    """Demos observed at steps ``visible`` plus the test query ``z_0``.

    Each entry of ``demos`` lists the symbols at the visible steps, in order.
    """

    demos: tuple[tuple[int, ...], ...]
    query: int
    horizon: int
    visible: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "visible", _check_visible(self.visible, self.horizon))
        for d in self.demos:
            if len(d) != len(self.visible):
                raise ValidationError(f"demo {tuple(d)} does not match visible steps {self.visible}")
        arr = np.asarray(self.demos, dtype=np.int64).reshape(len(self.demos), len(self.visible))
        arr.setflags(write=False)
        object.__setattr__(self, "demos", tuple(map(tuple, arr.tolist())))
        object.__setattr__(self, "query", int(self.query))
        object.__setattr__(self, "_array", arr)

    @classmethod
    def from_trajectories(cls, trajectories, query: int, horizon: int,
                          keep: Iterable[int] | None = None) -> "Prompt":
        """Build a prompt from full trajectories, keeping steps ``keep`` (default all)."""
        keep = range(1, horizon) if keep is None else keep
        vis = visible_steps(keep, horizon)
        demos = tuple(tuple(int(t[v]) for v in vis) for t in trajectories)
        return cls(demos, query, horizon, vis)

    @property
    def n(self) -> int:
        return len(self.demos)

    @property
    def keep_indices(self) -> tuple[int, ...]:
        return tuple(v for v in self.visible if 0 < v < self.horizon)

    def demo_array(self) -> np.ndarray:
        return self._array

    def restrict(self, visible: Sequence[int]) -> "Prompt":
        """Drop observed steps so that only ``visible`` remain."""
        vis = _check_visible(visible, self.horizon)
        missing = set(vis) - set(self.visible)
        if missing:
            raise ValidationError(f"steps {sorted(missing)} are not observed in this prompt")
        cols = [self.visible.index(v) for v in vis]
        return Prompt(self._array[:, cols], self.query, self.horizon, vis)

    def with_keep(self, keep: Iterable[int]) -> "Prompt":
        return self.restrict(visible_steps(keep, self.horizon))

    def truncate_prefix(self, h: int) -> "Prompt":
        """Keep only observed steps ``<= h``."""
        return self.restrict(tuple(v for v in self.visible if v <= h))


def trajectory_log_prob(task: TaskModel, trajectory: Sequence[int]) -> float:
    """Log-probability of a full trajectory ``z_0..z_H``."""
    if len(trajectory) != task.horizon + 1:
        raise ValidationError(f"trajectory length {len(trajectory)} != horizon + 1")
    vis = tuple(range(task.horizon + 1))
    return float(task.visible_log_likelihood(vis, np.asarray(trajectory)[None])[0])


def truncated_log_prob(task: TaskModel, visible_values: Sequence[int], keep: Iterable[int]) -> float:
    """Log-probability of a demo observed at steps ``{0} + keep + {H}``."""
    vis = visible_steps(keep, task.horizon)
    return float(task.visible_log_likelihood(vis, np.asarray(visible_values)[None])[0])


def _draw(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(probs.shape[0])
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def sample_trajectories(task: TaskModel, rng: np.random.Generator, size: int,
                        query: int | None = None) -> np.ndarray:
    """Draw ``size`` trajectories as an int array of shape ``(size, H + 1)``.

    A fixed ``query`` pins ``z_0`` and samples the remaining steps from it.
    """
    out = np.empty((size, task.horizon + 1), dtype=np.int64)
    if query is None:
        out[:, 0] = _draw(rng, np.broadcast_to(task.initial, (size, task.alphabet_size)))
    else:
        out[:, 0] = query
    for h in range(1, task.horizon + 1):
        out[:, h] = _draw(rng, task.step_rows(h, out[:, :h]))
    return out


def sample_trajectory(task: TaskModel, rng: np.random.Generator, query: int | None = None) -> tuple[int, ...]:
    return tuple(int(z) for z in sample_trajectories(task, rng, 1, query)[0])


def sample_prompt(family: TaskFamily, theta: int, n: int, rng: np.random.Generator,
                  keep: Iterable[int] | None = None, query: int | None = None) -> Prompt:
    """Sample ``n`` demos and a test query i.i.d. from task ``theta``."""
    task = family[family.index(theta)]
    trajs = sample_trajectories(task, rng, n)
    if query is None:
        query = int(sample_trajectories(task, rng, 1)[0, 0])
    return Prompt.from_trajectories(trajs, query, task.horizon, keep)


def all_trajectories(alphabet_size: int, horizon: int, cap: int = ENUM_CAP) -> np.ndarray:
    """Every trajectory in lexicographic order, matching ``joint().ravel()``."""
    _check_cap(alphabet_size ** (horizon + 1), cap, "trajectory enumeration")
    return np.array(list(itertools.product(range(alphabet_size), repeat=horizon + 1)), dtype=np.int64)
