"""Reasoning strategies run on top of the exact predictive.

Self-consistency votes over sampled paths, tree-of-thought runs a beamed
breadth-first search scored by a value function, and selection-inference
alternates between choosing a sub-history and predicting from it.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .divergences import hellinger_sq, kl, mode_gap
from .exceptions import ImpossiblePromptError, ValidationError
from .inference import sample_cot_paths, step_predictive
from .latent_model import ENUM_CAP, ROW_TOL, Prompt, TaskFamily, _check_cap, _log

# ---------------------------------------------------------------- self-consistency


@dataclass
class VoteResult:
    winner: int
    counts: np.ndarray


def majority_vote(answers: Sequence[int], alphabet_size: int) -> VoteResult:
    """Most frequent answer; ties go to the smallest symbol."""
    counts = np.bincount(np.asarray(answers, dtype=np.int64), minlength=alphabet_size)
    return VoteResult(int(np.argmax(counts)), counts)


def sc_cot(family: TaskFamily, prompt: Prompt, K: int, rng: np.random.Generator) -> VoteResult:
    """Sample ``K`` chain-of-thought paths and vote on their final symbol."""
    if K < 1:
        raise ValidationError("K must be positive")
    paths = sample_cot_paths(family, prompt, rng, K)
    return majority_vote(paths[:, -1], family.alphabet_size)


def sc_failure_bound(eps: float, alphabet_size: int, K: int) -> float:
    """Bernstein-type bound on the probability that the vote misses the mode."""
    return 2 * alphabet_size * math.exp(-3 * K * eps**2 / (24 + 8 * eps))


def sc_prompt_threshold(lam: float, prior_star: float, n_complement: int, eps: float,
                        const: float = 1.0) -> int:
    """Demo count after which the prompt predictive keeps the true mode.

    ``const`` is the unspecified absolute constant of the guarantee.
    """
    if n_complement == 0 or math.isinf(lam):
        return 0
    return math.ceil(const * (math.log(n_complement / prior_star) + math.log(1 / eps)) / lam)


# ---------------------------------------------------------------- tree-of-thought


@dataclass
class ValueFunction:
    """Scores of partial histories ``(z_0, ..., z_h)``; unknown ones get ``default``."""

    scores: Mapping[tuple[int, ...], float]
    optimal_path: tuple[int, ...] | None = None
    default: float = 0.0

    def __call__(self, history: Sequence[int]) -> float:
        return float(self.scores.get(tuple(history), self.default))


def greedy_path(family: TaskFamily, theta: int, query: int) -> tuple[tuple[int, ...], list[float]]:
    """Step-wise argmax path of ``theta`` from ``query`` and its step probabilities."""
    task = family[family.index(theta)]
    path, probs = [int(query)], []
    for h in range(1, family.horizon + 1):
        row = task.step_rows(h, np.array([path]))[0]
        z = int(np.argmax(row))
        path.append(z)
        probs.append(float(row[z]))
    return tuple(path), probs


def oracle_value_fn(family: TaskFamily, theta_star: int, query: int, scale: float = 0.99,
                    cap: int = ENUM_CAP) -> ValueFunction:
    """Value 1 on the greedy path of ``theta_star``, ``scale * P(z_h | prefix)`` elsewhere."""
    L, H = family.alphabet_size, family.horizon
    _check_cap(L**H, cap, "value-function enumeration")
    task = family[family.index(theta_star)]
    best, _ = greedy_path(family, theta_star, query)
    scores = {}
    for h in range(1, H + 1):
        for rest in itertools.product(range(L), repeat=h):
            hist = (int(query), *rest)
            if hist == best[: h + 1]:
                scores[hist] = 1.0
            else:
                scores[hist] = scale * float(task.step_rows(h, np.array([hist[:h]]))[0, hist[h]])
    return ValueFunction(scores, best)


@dataclass
class ToTResult:
    answer: tuple[int, ...]
    frontiers: list[list[tuple[int, ...]]] = field(default_factory=list)


def tot_bfs(family: TaskFamily, prompt: Prompt, value_fn: Callable[[Sequence[int]], float],
            K: int, B: int, rng: np.random.Generator) -> ToTResult:
    """Breadth-first tree search keeping the ``B`` best histories per step.

    At step ``h`` each kept history draws ``K`` continuations from the
    predictive of the demos cut to their first ``h + 1`` steps.  Ties in value
    are broken by the lexicographically smaller history.
    """
    if K < 1 or B < 1:
        raise ValidationError("K and B must be positive")
    frontier = [(prompt.query,)]
    frontiers = [frontier]
    for h in range(1, family.horizon + 1):
        cut = prompt.truncate_prefix(h)
        cands = set()
        for hist in frontier:
            p = step_predictive(family, cut, hist[1:])
            for z in rng.choice(len(p), size=K, p=p / p.sum()):
                cands.add((*hist, int(z)))
        frontier = sorted(cands, key=lambda t: (-value_fn(t), t))[:B]
        frontiers.append(frontier)
    return ToTResult(frontier[0], frontiers)


def tot_failure_bound(p_star: Sequence[float], eps: float, K: int) -> float:
    return float(sum((1 - p + eps * p) ** K for p in p_star))


def tot_concentration(family: TaskFamily, prompt: Prompt, theta_star: int) -> float:
    """Smallest ``eps`` with ``p_h >= (1 - eps) p_h*`` along the greedy path of ``theta_star``."""
    best, p_star = greedy_path(family, theta_star, prompt.query)
    eps = 0.0
    for h in range(1, family.horizon + 1):
        p = step_predictive(family, prompt.truncate_prefix(h), best[1:h])[best[h]]
        eps = max(eps, 1 - p / p_star[h - 1])
    return eps


def tot_prompt_threshold(lam_star: float, horizon: int, n_tasks: int, prior_star: float, eps: float) -> int:
    if n_tasks <= 1 or math.isinf(lam_star):
        return 0
    val = (2 * math.log(horizon * n_tasks) + math.log((1 - prior_star) / prior_star) + math.log(1 / eps)) / lam_star
    return max(0, math.ceil(val))


# ---------------------------------------------------------------- selection-inference


def _mask_key(mask: Sequence[int]) -> str:
    return ",".join(str(int(i)) for i in mask)


class SITask:
    """Hierarchical task: a selection law over masks and per-mask inference tables.

    ``selection[h - 1][m]`` is the probability of picking mask
    ``allowed_masks[h - 1][m]`` at step ``h``.  ``inference[mask]`` has shape
    ``(L,) * len(mask) + (L,)`` and gives ``z_h`` from the selected symbols.
    """

    def __init__(self, initial, selection, inference: Mapping, name: str | None = None):
        self.initial = np.asarray(initial, dtype=float)
        self.selection = [np.asarray(s, dtype=float) for s in selection]
        self.inference = {tuple(k): np.asarray(v, dtype=float) for k, v in inference.items()}
        self.name = name

    def infer_rows(self, mask: tuple[int, ...], histories: np.ndarray) -> np.ndarray:
        table = self.inference[mask]
        return table[tuple(histories[:, list(mask)].T)] if mask else np.broadcast_to(table, (len(histories), len(table)))


class SIFamily:
    """Selection-inference tasks sharing an alphabet, horizon and mask menu."""

    def __init__(self, tasks: Sequence[SITask], allowed_masks: Sequence[Sequence[Sequence[int]]],
                 prior: Sequence[float] | None = None, names: Sequence[str] | None = None):
        self.tasks = tuple(tasks)
        self.allowed_masks = [[tuple(int(i) for i in m) for m in step] for step in allowed_masks]
        n = len(self.tasks)
        self.prior = np.full(n, 1.0 / n) if prior is None else np.asarray(prior, dtype=float)
        self.names = tuple(names) if names else tuple(t.name or f"task{i}" for i, t in enumerate(self.tasks))
        self._validate()

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def alphabet_size(self) -> int:
        return self.tasks[0].initial.shape[0]

    @property
    def horizon(self) -> int:
        return len(self.allowed_masks)

    def index(self, theta):
        if isinstance(theta, str):
            return self.names.index(theta)
        return int(theta)

    def _validate(self):
        L, H = self.alphabet_size, self.horizon
        problems = []
        if abs(self.prior.sum() - 1) > ROW_TOL or np.any(self.prior < 0):
            problems.append("prior is not a distribution")
        for h, masks in enumerate(self.allowed_masks, start=1):
            for m in masks:
                if any(not 0 <= i < h for i in m) or list(m) != sorted(set(m)):
                    problems.append(f"step {h}: mask {list(m)} is not a sorted subset of 0..{h - 1}")
        for ti, t in enumerate(self.tasks):
            rows = [(0, (), t.initial)]
            if len(t.selection) != H:
                problems.append(f"task {ti}: needs {H} selection vectors")
                continue
            for h, s in enumerate(t.selection, start=1):
                if s.shape != (len(self.allowed_masks[h - 1]),):
                    problems.append(f"task {ti}, step {h}: selection has wrong length")
                rows.append((h, ("selection",), s))
            for masks in self.allowed_masks:
                for m in masks:
                    if m not in t.inference:
                        problems.append(f"task {ti}: missing inference table for mask {list(m)}")
                    elif t.inference[m].shape != (L,) * (len(m) + 1):
                        problems.append(f"task {ti}: inference table for mask {list(m)} has wrong shape")
                    else:
                        tab = t.inference[m].reshape(-1, L)
                        for r, row in enumerate(tab):
                            rows.append((m, ("inference", r), row))
            for step, key, row in rows:
                if t.initial.shape != (L,):
                    problems.append(f"task {ti}: initial has wrong length")
                    break
                if np.any(row < 0) or abs(row.sum() - 1) > ROW_TOL:
                    problems.append(f"task {ti}, step {step}, row {key}: sums to {row.sum():.15g}")
        if problems:
            raise ValidationError("invalid SI family: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "alphabet_size": self.alphabet_size,
            "horizon": self.horizon,
            "prior": self.prior.tolist(),
            "allowed_masks": [[list(m) for m in step] for step in self.allowed_masks],
            "tasks": [
                {"name": n, "initial": t.initial.tolist(), "selection": [s.tolist() for s in t.selection],
                 "inference": {_mask_key(k): v.tolist() for k, v in t.inference.items()}}
                for n, t in zip(self.names, self.tasks)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SIFamily":
        try:
            tasks = []
            for t in d["tasks"]:
                inf = {tuple(int(i) for i in k.split(",") if i != ""): v for k, v in t["inference"].items()}
                tasks.append(SITask(t["initial"], t["selection"], inf, t.get("name")))
            fam = cls(tasks, d["allowed_masks"], d.get("prior"))
        except KeyError as exc:
            raise ValidationError(f"SI family missing key {exc}") from None
        if fam.alphabet_size != d.get("alphabet_size", fam.alphabet_size) or fam.horizon != d.get("horizon", fam.horizon):
            raise ValidationError("alphabet_size/horizon do not match the tables")
        return fam

    @classmethod
    def load(cls, path: str | Path) -> "SIFamily":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SIPrompt:
    """SI demos as full trajectories with their selection masks, plus the query."""

    trajectories: tuple[tuple[int, ...], ...]
    masks: tuple[tuple[int, ...], ...]
    query: int

    @property
    def n(self) -> int:
        return len(self.trajectories)


def _si_sample(family: SIFamily, task: SITask, rng: np.random.Generator, size: int, query: int | None):
    L, H = family.alphabet_size, family.horizon
    z = np.empty((size, H + 1), dtype=np.int64)
    tau = np.empty((size, H), dtype=np.int64)
    z[:, 0] = rng.choice(L, size=size, p=task.initial) if query is None else query
    for h in range(1, H + 1):
        sel = task.selection[h - 1]
        tau[:, h - 1] = rng.choice(len(sel), size=size, p=sel / sel.sum())
        for m_idx, mask in enumerate(family.allowed_masks[h - 1]):
            rows_at = np.flatnonzero(tau[:, h - 1] == m_idx)
            if rows_at.size:
                probs = task.infer_rows(mask, z[rows_at, :h])
                cdf = np.cumsum(probs, axis=1)
                cdf /= cdf[:, -1:]
                u = rng.random(rows_at.size)
                z[rows_at, h] = np.minimum((cdf <= u[:, None]).sum(axis=1), L - 1)
    return z, tau


def sample_si_prompt(family: SIFamily, theta: int, n: int, rng: np.random.Generator,
                     query: int | None = None) -> SIPrompt:
    task = family[family.index(theta)]
    z, tau = _si_sample(family, task, rng, n, None)
    if query is None:
        query = int(rng.choice(family.alphabet_size, p=task.initial))
    return SIPrompt(tuple(map(tuple, z.tolist())), tuple(map(tuple, tau.tolist())), query)


def si_posteriors(family: SIFamily, prompt: SIPrompt) -> tuple[np.ndarray, np.ndarray]:
    """Posteriors from the selection pairs and from the inference pairs.

    Both include the prior and the test query; the selection posterior also
    scores each demo's ``z_0``, which is part of its first history.
    """
    lse, lin = [], []
    for i, t in enumerate(family.tasks):
        base = _log(family.prior[i]) + _log(t.initial[prompt.query])
        sel_lw = inf_lw = base
        for traj, masks in zip(prompt.trajectories, prompt.masks):
            sel_lw += _log(t.initial[traj[0]])
            for h in range(1, family.horizon + 1):
                sel_lw += _log(t.selection[h - 1][masks[h - 1]])
                mask = family.allowed_masks[h - 1][masks[h - 1]]
                row = t.inference[mask][tuple(traj[j] for j in mask)]
                inf_lw += _log(row[traj[h]])
        lse.append(sel_lw)
        lin.append(inf_lw)
    out = []
    for lw in (np.array(lse), np.array(lin)):
        if not np.any(np.isfinite(lw)):
            raise ImpossiblePromptError("every SI task assigns probability zero to the prompt")
        out.append(np.exp(lw - logsumexp(lw)))
    return out[0], out[1]


def _forward(family: SIFamily, query: int, w_se: np.ndarray, w_in: np.ndarray, cap: int) -> np.ndarray:
    """Law of the full history under the mixed selection and inference predictives."""
    L, H = family.alphabet_size, family.horizon
    _check_cap(L ** (H + 1), cap, "SI forward enumeration")
    law = np.zeros(L)
    law[query] = 1.0
    for h in range(1, H + 1):
        hists = np.array(list(itertools.product(range(L), repeat=h)), dtype=np.int64)
        step = np.zeros((len(hists), L))
        for m_idx, mask in enumerate(family.allowed_masks[h - 1]):
            p_sel = sum(w * t.selection[h - 1][m_idx] for w, t in zip(w_se, family.tasks))
            p_inf = sum(w * t.infer_rows(mask, hists) for w, t in zip(w_in, family.tasks))
            step += p_sel * p_inf
        law = law[..., None] * step.reshape((L,) * h + (L,))
    return law


def si_predictive(family: SIFamily, prompt: SIPrompt, cap: int = ENUM_CAP) -> np.ndarray:
    """Exact law of the final answer produced by the SI chain."""
    w_se, w_in = si_posteriors(family, prompt)
    law = _forward(family, prompt.query, w_se, w_in, cap)
    return law.reshape(-1, family.alphabet_size).sum(axis=0)


def si_answer_law(family: SIFamily, theta: int, query: int, cap: int = ENUM_CAP) -> np.ndarray:
    w = np.zeros(len(family))
    w[family.index(theta)] = 1.0
    return _forward(family, query, w, w, cap).reshape(-1, family.alphabet_size).sum(axis=0)


def si_prompting_error(family: SIFamily, theta_star: int, prompt: SIPrompt) -> float:
    return kl(si_answer_law(family, theta_star, prompt.query), si_predictive(family, prompt))


def si_generate(family: SIFamily, prompt: SIPrompt, rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Sample one test path and its masks by alternating the two predictives."""
    w_se, w_in = si_posteriors(family, prompt)
    L = family.alphabet_size
    path, masks = [prompt.query], []
    for h in range(1, family.horizon + 1):
        p_sel = sum(w * t.selection[h - 1] for w, t in zip(w_se, family.tasks))
        m_idx = int(rng.choice(len(p_sel), p=p_sel / p_sel.sum()))
        mask = family.allowed_masks[h - 1][m_idx]
        hist = np.array([path])
        p_inf = sum(w * t.infer_rows(mask, hist)[0] for w, t in zip(w_in, family.tasks))
        path.append(int(rng.choice(L, p=p_inf / p_inf.sum())))
        masks.append(m_idx)
    return tuple(path), tuple(masks)


@dataclass
class SISeparation:
    lambda_q: float
    lambda_s: float
    lambda_i: float

    @property
    def total(self) -> float:
        return self.lambda_q + self.lambda_s + self.lambda_i


def si_separation(family: SIFamily, theta_star: int, tol: float = 1e-9) -> SISeparation:
    """Query, selection and inference separation of ``theta_star`` from non-equivalent tasks."""
    star = family.index(theta_star)
    L, H = family.alphabet_size, family.horizon
    ref = np.stack([si_answer_law(family, star, z) for z in range(L)])
    others = [i for i in range(len(family))
              if i != star and np.max(np.abs(np.stack([si_answer_law(family, i, z) for z in range(L)]) - ref)) > tol]
    if not others:
        inf = float("inf")
        return SISeparation(inf, inf, inf)
    ts = family[star]
    w = np.zeros(len(family))
    w[star] = 1.0
    hist_laws = [ts.initial]
    for h in range(1, H):
        law = hist_laws[-1]
        hists = np.array(list(itertools.product(range(L), repeat=h)), dtype=np.int64)
        step = sum(ts.selection[h - 1][m] * ts.infer_rows(mask, hists)
                   for m, mask in enumerate(family.allowed_masks[h - 1]))
        hist_laws.append(law[..., None] * step.reshape((L,) * h + (L,)))
    lq, ls, li = [], [], []
    for i in others:
        t = family[i]
        lq.append(hellinger_sq(ts.initial, t.initial))
        ls.append(sum(hellinger_sq(ts.selection[h], t.selection[h]) for h in range(H)))
        total = 0.0
        for h in range(1, H + 1):
            hists = np.array(list(itertools.product(range(L), repeat=h)), dtype=np.int64)
            p_hist = hist_laws[h - 1].ravel()
            for m, mask in enumerate(family.allowed_masks[h - 1]):
                a, b = ts.infer_rows(mask, hists), t.infer_rows(mask, hists)
                h2 = 1 - np.sqrt(a * b).sum(axis=1)
                total += ts.selection[h - 1][m] * float(np.dot(p_hist, h2))
        li.append(total)
    return SISeparation(min(lq), min(ls), min(li))


def vote_gap(family: TaskFamily, theta_star: int, query: int) -> tuple[int, float]:
    """Mode and gap of ``P(y | z_0 = query, theta_star)``."""
    return mode_gap(family[family.index(theta_star)].answer_matrix()[query])
