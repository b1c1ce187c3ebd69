import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cotbma.estimators import BMAPredictor
from cotbma.exceptions import ImpossiblePromptError, ValidationError
from cotbma.families import binary_chain
from cotbma.inference import (
    bma_predictive, posterior, prompting_error, sample_cot_paths, step_predictive, truncated_predictive,
)
from cotbma.latent_model import MarkovTask, Prompt, TaskFamily, all_trajectories, sample_prompt
from cotbma.oracle import brute_force_posterior_predictive
from strategies_hyp import family_and_prompt


def test_posterior_worked_value(skewed):
    # A' : 0.8 * 0.81 * 0.8 against B' : 0.2 * 0.01 * 0.2
    w = posterior(skewed, Prompt.from_trajectories([(0, 0, 0)], 0, 2))
    assert w[0] == pytest.approx(5184 / 5188, abs=1e-12)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


def test_symmetric_pair_predictive_is_exact(sym, rng):
    # both tasks give the same answer row, so any prompt reproduces it exactly
    for _ in range(20):
        theta = int(rng.integers(2))
        p = sample_prompt(sym, theta, int(rng.integers(0, 6)), rng, keep=[] if rng.random() < 0.5 else [1])
        assert prompting_error(sym, 0, p) == 0.0
        assert prompting_error(sym, 1, p) == 0.0


def test_icl_prompt_carries_no_information_for_symmetric_pair(sym):
    p = Prompt.from_trajectories([(0, 1, 0), (1, 1, 1)], 0, 2, keep=[])
    np.testing.assert_allclose(posterior(sym, p), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(bma_predictive(sym, p), [0.82, 0.18], atol=1e-15)


def test_impossible_prompt():
    a = MarkovTask.homogeneous([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 2)
    fam = TaskFamily([a])
    with pytest.raises(ImpossiblePromptError):
        posterior(fam, Prompt.from_trajectories([(0, 1, 1)], 0, 2))


def test_bad_query(sym):
    with pytest.raises(ValidationError):
        bma_predictive(sym, Prompt.from_trajectories([], 5, 2))


def test_step_predictive_needs_a_step(sym):
    with pytest.raises(ValidationError):
        step_predictive(sym, Prompt.from_trajectories([], 0, 2), (0, 0))


def test_truncated_predictive_uses_restricted_demos(sym):
    p = Prompt.from_trajectories([(0, 0, 0)], 0, 2)
    np.testing.assert_allclose(truncated_predictive(sym, p, keep=[]), [0.82, 0.18], atol=1e-15)


def test_prompting_error_decays_for_distinct_tasks(decay, rng):
    errs = []
    for n in (1, 64):
        errs.append(np.median([prompting_error(decay, 0, sample_prompt(decay, 0, n, rng)) for _ in range(40)]))
    assert errs[1] < errs[0]


def test_sample_cot_paths_law(skewed):
    p = Prompt.from_trajectories([(0, 0, 0)], 1, 2)
    paths = sample_cot_paths(skewed, p, np.random.default_rng(5), 40000)
    assert np.all(paths[:, 0] == 1)
    # exact law of the generated path by chaining step predictives
    for z1 in range(2):
        p1 = step_predictive(skewed, p)[z1]
        for z2 in range(2):
            want = p1 * step_predictive(skewed, p, (z1,))[z2]
            got = np.mean((paths[:, 1] == z1) & (paths[:, 2] == z2))
            assert got == pytest.approx(want, abs=0.01)


@given(family_and_prompt(max_n=2, max_horizon=3))
def test_matches_brute_force(fp):
    fam, prompt = fp
    np.testing.assert_allclose(bma_predictive(fam, prompt), brute_force_posterior_predictive(fam, prompt), atol=1e-10)


@given(family_and_prompt(max_n=2, max_horizon=3))
def test_chained_steps_match_answer_law(fp):
    """Summing the chained step predictives over hidden steps gives the answer predictive."""
    fam, prompt = fp
    H, L = fam.horizon, fam.alphabet_size
    total = np.zeros(L)
    for tr in all_trajectories(L, H):
        if tr[0] != prompt.query:
            continue
        pr = 1.0
        for h in range(1, H + 1):
            pr *= step_predictive(fam, prompt, tr[1:h])[tr[h]]
            if pr == 0:
                break
        total[tr[H]] += pr
    np.testing.assert_allclose(total, bma_predictive(fam, prompt), atol=1e-10)


@given(family_and_prompt(max_n=3), st.randoms())
def test_demo_order_is_irrelevant(fp, rnd):
    fam, prompt = fp
    demos = list(prompt.demos)
    rnd.shuffle(demos)
    other = Prompt(tuple(demos), prompt.query, prompt.horizon, prompt.visible)
    np.testing.assert_allclose(posterior(fam, other), posterior(fam, prompt), atol=1e-12)


@given(family_and_prompt(max_n=2), st.integers(0, 3))
def test_prompting_error_nonnegative_and_anchor_free(fp, theta):
    fam, prompt = fp
    theta = theta % len(fam)
    e = prompting_error(fam, theta, prompt)
    assert e >= 0
    q = bma_predictive(fam, prompt)
    np.testing.assert_allclose(bma_predictive(fam, prompt, anchor=theta), q, atol=1e-14)


class TestBMAPredictor:
    def test_fit_predict(self, skewed):
        est = BMAPredictor(skewed).fit(np.array([[0, 0, 0]]))
        np.testing.assert_allclose(est.posterior(0)[0], 5184 / 5188, atol=1e-12)
        proba = est.predict_proba([0, 1])
        assert proba.shape == (2, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert est.predict([0]).tolist() == [0]

    def test_keep_drops_middle(self, sym):
        est = BMAPredictor(sym, keep=[]).fit([[0, 1, 0]])
        assert est.visible_ == (0, 2)
        np.testing.assert_allclose(est.posterior(0), [0.5, 0.5])

    def test_rejects_bad_input(self, sym):
        with pytest.raises(ValidationError):
            BMAPredictor(sym).fit([[0, 2, 0]])
        with pytest.raises(ValidationError):
            BMAPredictor(sym).fit([[0, 1]])

    def test_unfitted(self, sym):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            BMAPredictor(sym).predict([0])

    def test_get_params_clone(self, sym):
        from sklearn.base import clone
        est = BMAPredictor(sym, keep=[1])
        assert est.get_params() == {"family": sym, "keep": [1]}
        c = clone(est)
        assert c.keep == [1] and not hasattr(c, "demos_")


def test_long_horizon_markov_family_scales():
    fam = TaskFamily([binary_chain(0.9, horizon=40), binary_chain(0.6, horizon=40)])
    traj = [tuple([0] * 41)]
    p = Prompt.from_trajectories(traj, 0, 40, keep=[10, 20])
    q = bma_predictive(fam, p)
    assert q.sum() == pytest.approx(1.0) and math.isfinite(prompting_error(fam, 0, p))
