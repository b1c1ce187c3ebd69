"""Seeded experiment runner behind the command line.

Every trial draws from its own generator, keyed by ``(seed, kind, n, trial)``,
so results do not depend on thread count or scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .attention_bma import convergence_experiment, default_theta_star, make_feature_maps
from .divergences import equivalence_classes, class_of, mode_gap, separation_lambda, separation_per_step
from .exceptions import ValidationError
from .families import decay_pair, dominance_suite, tot_pair
from .inference import prompting_error
from .latent_model import TaskFamily, sample_prompt
from .oracle import dominance_check
from .strategies import (
    SIFamily, greedy_path, oracle_value_fn, sample_si_prompt, sc_cot, sc_failure_bound,
    sc_prompt_threshold, si_prompting_error, tot_bfs, tot_concentration, tot_failure_bound,
    tot_prompt_threshold,
)

log = logging.getLogger(__name__)

KINDS = ("decay", "sc", "tot", "si", "attn", "dominance")

HEADERS = {
    "decay": ["n", "trial", "kl"],
    "sc": ["K", "trials", "fail_rate", "bound"],
    "tot": ["K", "trials", "fail_rate", "bound"],
    "si": ["n", "trial", "kl"],
    "attn": ["n", "seed", "C", "max_err", "renorm_dev"],
    "dominance": ["pair_id", "J", "Jprime", "n", "delta_kl", "identity_residual"],
}
SUMMARY_HEADER = ["n", "median_kl", "p90_kl"]

ATTN_DEFAULTS = {"alphabet_size": 4, "d_k": 4, "d_v": 4, "horizon": 2, "sigma": 0.3,
                 "key_scale": 3.0, "phi": "identity", "first_block_only": True}


@dataclass
class ExperimentConfig:
    kind: str
    family_path: str | None = None
    theta_star: int | str = 0
    n_grid: list[int] | None = None
    K_grid: list[int] | None = None
    trials: int = 200
    seed: int = 0
    output_path: str = "results"
    n: int | None = None
    query: int | None = None
    keep: list[int] | None = None
    beam: int = 1
    bound_const: float = 8.0
    attn: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        for name in ("n_grid", "K_grid"):
            grid = getattr(self, name)
            if grid is None:
                continue
            if not isinstance(grid, list) or not grid or not all(isinstance(v, int) and v > 0 for v in grid):
                raise ValidationError(f"{name}: expected a non-empty list of positive integers")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValidationError(f"{name}: values must be strictly increasing")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ValidationError("trials: expected a positive integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed: expected a non-negative integer")
        if not isinstance(self.attn, dict):
            raise ValidationError("attn: expected an object")
        unknown = set(self.attn) - set(ATTN_DEFAULTS)
        if unknown:
            raise ValidationError(f"attn.{sorted(unknown)[0]}: unknown key")
        if self.kind in ("decay", "si", "attn") and self.n_grid is None:
            self.n_grid = [1, 2, 4, 8, 16, 32] if self.kind == "decay" else (
                [1, 2, 4, 8, 16] if self.kind == "si" else [32, 128, 512, 2048])
        if self.kind in ("sc", "tot") and self.K_grid is None:
            self.K_grid = [10, 50, 200] if self.kind == "sc" else [2, 5, 10]
        if self.kind == "dominance" and self.n_grid is None:
            self.n_grid = [1, 2]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ValidationError(f"{unknown[0]}: unknown config key")
        if "kind" not in d:
            raise ValidationError("kind: missing")
        return cls(**d)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


class RngStream:
    """Counter-based generator factory: one independent stream per counter tuple."""

    def __init__(self, seed: int, kind: str):
        self.seed = int(seed)
        self.kind_key = zlib.crc32(kind.encode())

    def generator(self, *counters: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.kind_key, *(int(c) for c in counters)))
        return np.random.default_rng(seq)


@dataclass
class ExperimentResult:
    kind: str
    header: list[str]
    rows: list[list[Any]]
    summary_rows: list[list[Any]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_family(cfg: ExperimentConfig, default: Callable[[], TaskFamily]) -> TaskFamily:
    return default() if cfg.family_path is None else TaskFamily.load(cfg.family_path)


def _summary(rows: list[list[Any]], grid: Sequence[int]) -> tuple[list[list[Any]], list[float]]:
    out, medians = [], []
    for n in grid:
        vals = np.array([r[2] for r in rows if r[0] == n])
        med = float(np.median(vals))
        out.append([n, med, float(np.percentile(vals, 90))])
        medians.append(med)
    return out, medians


def _log_slope(grid: Sequence[int], medians: Sequence[float]) -> float:
    logs = np.log(np.maximum(np.asarray(medians), 1e-300))
    return float(np.polyfit(np.asarray(grid, float), logs, 1)[0])


def run_decay(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fam = _load_family(cfg, decay_pair)
    star = fam.index(cfg.theta_star)
    stream = RngStream(cfg.seed, cfg.kind)
    jobs = [(n, t) for n in cfg.n_grid for t in range(cfg.trials)]

    def one(job):
        n, t = job
        prompt = sample_prompt(fam, star, n, stream.generator(n, t), keep=cfg.keep)
        return [n, t, prompting_error(fam, star, prompt)]

    rows = _map(one, jobs, threads)
    summary, medians = _summary(rows, cfg.n_grid)
    lam = separation_lambda(fam, star)
    meta = {"kind": cfg.kind, "theta_star": fam.names[star], "lambda": lam, "minus_two_lambda": -2 * lam,
            "log_median_slope": _log_slope(cfg.n_grid, medians), "n_grid": cfg.n_grid, "trials": cfg.trials,
            "seed": cfg.seed}
    return ExperimentResult(cfg.kind, HEADERS["decay"], rows, summary, meta)


def _sc_setup(fam: TaskFamily, star: int, cfg: ExperimentConfig) -> tuple[int, float]:
    gaps = [mode_gap(fam[star].answer_matrix()[z])[1] for z in range(fam.alphabet_size) if fam[star].initial[z] > 0]
    eps = min(gaps)
    if eps <= 0:
        raise ValidationError("theta_star has a tied answer mode; the vote has no target")
    if cfg.n is not None:
        return cfg.n, eps
    same = class_of(equivalence_classes(fam), star)
    lam = separation_lambda(fam, star)
    n = sc_prompt_threshold(lam, float(fam.prior[star]), len(fam) - len(same), eps, cfg.bound_const)
    return n, eps


def run_sc(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fam = _load_family(cfg, decay_pair)
    star = fam.index(cfg.theta_star)
    n, eps = _sc_setup(fam, star, cfg)
    stream = RngStream(cfg.seed, cfg.kind)
    rows = []
    for K in cfg.K_grid:
        def one(t, K=K):
            rng = stream.generator(K, t)
            prompt = sample_prompt(fam, star, n, rng)
            target = int(np.argmax(fam[star].answer_matrix()[prompt.query]))
            return sc_cot(fam, prompt, K, rng).winner != target

        fails = _map(one, range(cfg.trials), threads)
        rows.append([K, cfg.trials, float(np.mean(fails)), sc_failure_bound(eps, fam.alphabet_size, K)])
    meta = {"kind": cfg.kind, "n": n, "eps": eps, "theta_star": fam.names[star], "seed": cfg.seed,
            "bound_const": cfg.bound_const}
    return ExperimentResult(cfg.kind, HEADERS["sc"], rows, metadata=meta)


def run_tot(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fam = _load_family(cfg, tot_pair)
    star = fam.index(cfg.theta_star)
    query = 0 if cfg.query is None else cfg.query
    best, p_star = greedy_path(fam, star, query)
    value_fn = oracle_value_fn(fam, star, query)
    if cfg.n is None:
        lam = min(separation_per_step(fam, star))
        n = tot_prompt_threshold(lam, fam.horizon, len(fam), float(fam.prior[star]), 0.05)
    else:
        n = cfg.n
    stream = RngStream(cfg.seed, cfg.kind)
    rows, eps_all = [], 0.0
    for K in cfg.K_grid:
        def one(t, K=K):
            rng = stream.generator(K, t)
            prompt = sample_prompt(fam, star, n, rng, query=query)
            res = tot_bfs(fam, prompt, value_fn, K, cfg.beam, rng)
            return res.answer != best, tot_concentration(fam, prompt, star)

        out = _map(one, range(cfg.trials), threads)
        eps = max(max(e for _, e in out), 0.0)
        eps_all = max(eps_all, eps)
        rows.append([K, cfg.trials, float(np.mean([f for f, _ in out])), tot_failure_bound(p_star, eps, K)])
    meta = {"kind": cfg.kind, "n": n, "query": query, "optimal_path": list(best), "p_star": p_star,
            "eps": eps_all, "seed": cfg.seed, "beam": cfg.beam}
    return ExperimentResult(cfg.kind, HEADERS["tot"], rows, metadata=meta)


def default_si_family() -> SIFamily:
    with resources.files("cotbma.data").joinpath("si_pair.json").open() as fh:
        return SIFamily.from_dict(json.load(fh))


def run_si(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fam = default_si_family() if cfg.family_path is None else SIFamily.load(cfg.family_path)
    star = fam.index(cfg.theta_star)
    stream = RngStream(cfg.seed, cfg.kind)
    jobs = [(n, t) for n in cfg.n_grid for t in range(cfg.trials)]

    def one(job):
        n, t = job
        prompt = sample_si_prompt(fam, star, n, stream.generator(n, t))
        return [n, t, si_prompting_error(fam, star, prompt)]

    rows = _map(one, jobs, threads)
    summary, medians = _summary(rows, cfg.n_grid)
    meta = {"kind": cfg.kind, "theta_star": fam.names[star], "log_median_slope": _log_slope(cfg.n_grid, medians),
            "n_grid": cfg.n_grid, "trials": cfg.trials, "seed": cfg.seed}
    return ExperimentResult(cfg.kind, HEADERS["si"], rows, summary, meta)


def run_attn(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    p = {**ATTN_DEFAULTS, **cfg.attn}
    stream = RngStream(cfg.seed, cfg.kind)

    def one(s):
        rng = stream.generator(s)
        maps = make_feature_maps(p["alphabet_size"], p["d_k"], p["d_v"], p["horizon"], rng,
                                 key_scale=p["key_scale"], phi=p["phi"])
        theta = default_theta_star(maps, rng, p["first_block_only"])
        return convergence_experiment(maps, theta, cfg.n_grid, p["sigma"], s, rng=rng)

    rows, worst_resid = [], 0.0
    for res in _map(one, range(cfg.trials), threads):
        for r in res:
            rows.append([r.n, r.seed, r.C, r.max_err, r.renorm_dev])
            worst_resid = max(worst_resid, r.residual)
    meta = {"kind": cfg.kind, "params": p, "n_grid": cfg.n_grid, "seeds": cfg.trials, "seed": cfg.seed,
            "max_normal_equation_residual": worst_resid}
    return ExperimentResult(cfg.kind, HEADERS["attn"], rows, metadata=meta)


def _fmt_keep(keep: Sequence[int]) -> str:
    return "{" + ",".join(str(j) for j in keep) + "}"


def run_dominance(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    if cfg.family_path is None:
        cases = dominance_suite(seed=cfg.seed or 20240)
    else:
        fam = TaskFamily.load(cfg.family_path)
        H = fam.horizon
        steps = list(range(1, H))
        cases = []
        for n in cfg.n_grid:
            for j in range(len(steps)):
                cases.append((fam, tuple(steps[:j]), tuple(steps[: j + 1]), n))

    def one(case):
        fam, keep, keep_prime, n = case
        return dominance_check(fam, keep, keep_prime, n)

    rows = []
    for i, r in enumerate(_map(one, cases, threads)):
        rows.append([i, _fmt_keep(r.keep), _fmt_keep(r.keep_prime), r.n, r.delta_kl, r.identity_residual])
    meta = {"kind": cfg.kind, "cases": len(rows), "all_ok": all(r[4] >= -1e-10 and r[5] <= 1e-9 for r in rows)}
    return ExperimentResult(cfg.kind, HEADERS["dominance"], rows, metadata=meta)


RUNNERS = {"decay": run_decay, "sc": run_sc, "tot": run_tot, "si": run_si, "attn": run_attn,
           "dominance": run_dominance}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    log.info("running %s with seed %d", cfg.kind, cfg.seed)
    return RUNNERS[cfg.kind](cfg, threads)


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_result(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Write ``<kind>.csv``, an optional ``<kind>_summary.csv`` and the JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{result.kind}.csv"]
    paths[0].write_text(format_csv(result.header, result.rows))
    if result.summary_rows:
        p = out / f"{result.kind}_summary.csv"
        p.write_text(format_csv(SUMMARY_HEADER, result.summary_rows))
        paths.append(p)
    p = out / f"{result.kind}_summary.json"
    p.write_text(json.dumps(_jsonable(result.metadata), indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths
