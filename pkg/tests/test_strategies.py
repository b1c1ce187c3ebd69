import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cotbma.exceptions import ValidationError
from cotbma.families import tot_pair
from cotbma.harness import default_si_family
from cotbma.latent_model import Prompt, sample_prompt
from cotbma.strategies import (
    SIFamily, SIPrompt, ValueFunction, greedy_path, majority_vote, oracle_value_fn, sc_cot, sc_failure_bound,
    sc_prompt_threshold, si_answer_law, si_generate, si_posteriors, si_predictive, si_prompting_error,
    si_separation, tot_bfs, tot_concentration, tot_failure_bound, tot_prompt_threshold, vote_gap,
)


class TestSelfConsistency:
    def test_bound_value(self):
        # 2 * 2 * exp(-3 * 200 * 0.64^2 / (24 + 8 * 0.64))
        assert sc_failure_bound(0.64, 2, 200) == pytest.approx(8.645805530218098e-4, rel=1e-12)

    def test_bound_decreases_in_k(self):
        vals = [sc_failure_bound(0.3, 3, K) for K in (10, 100, 1000)]
        assert vals[0] > vals[1] > vals[2]

    def test_vote_ties_go_to_smallest(self):
        assert majority_vote([2, 1, 2, 1], 3).winner == 1
        assert majority_vote([0, 2, 2], 3).counts.tolist() == [1, 0, 2]

    def test_threshold(self):
        assert sc_prompt_threshold(math.inf, 0.5, 1, 0.1) == 0
        n = sc_prompt_threshold(0.2, 0.5, 1, 0.1)
        assert n == math.ceil((math.log(2) + math.log(10)) / 0.2)
        assert sc_prompt_threshold(0.2, 0.5, 1, 0.1, const=8) >= 8 * (n - 1)

    def test_vote_recovers_mode(self, decay, rng):
        mode, gap = vote_gap(decay, 0, 0)
        assert gap > 0
        prompt = sample_prompt(decay, 0, 60, rng, query=0)
        assert sc_cot(decay, prompt, 2000, rng).winner == mode

    def test_bad_k(self, decay, rng):
        with pytest.raises(ValidationError):
            sc_cot(decay, sample_prompt(decay, 0, 1, rng), 0, rng)


class TestTreeOfThought:
    def test_greedy_path(self):
        fam = tot_pair()
        best, probs = greedy_path(fam, 0, 0)
        assert best == (0, 0, 0)
        assert probs == pytest.approx([0.6, 0.7])

    def test_oracle_values(self):
        fam = tot_pair()
        v = oracle_value_fn(fam, 0, 0)
        assert v((0, 0)) == 1.0 and v((0, 0, 0)) == 1.0
        assert v((0, 1)) == pytest.approx(0.99 * 0.4)
        assert v((0, 1, 1)) == pytest.approx(0.99 * 0.8)

    def test_beam_keeps_best_value(self, sym, rng):
        v = ValueFunction({(0, 0): 0.9, (0, 1): 0.2, (0, 0, 0): 1.0, (0, 0, 1): 0.5})
        prompt = Prompt.from_trajectories([], 0, 2)
        res = tot_bfs(sym, prompt, v, K=50, B=1, rng=rng)
        assert res.frontiers[1] == [(0, 0)]
        assert res.answer == (0, 0, 0)
        wide = tot_bfs(sym, prompt, v, K=50, B=2, rng=rng)
        assert wide.frontiers[1] == [(0, 0), (0, 1)]

    def test_ties_broken_by_history(self, sym, rng):
        res = tot_bfs(sym, Prompt.from_trajectories([], 1, 2), ValueFunction({}), K=50, B=1, rng=rng)
        assert res.frontiers[1] == [(1, 0)]

    def test_single_sample_success_rate(self):
        # with a long prompt the predictive is T*, and K = 1 succeeds with 0.6 * 0.7
        fam = tot_pair()
        rng = np.random.default_rng(3)
        v = oracle_value_fn(fam, 0, 0)
        prompt = sample_prompt(fam, 0, 200, rng, query=0)
        assert tot_concentration(fam, prompt, 0) < 0.05
        wins = np.mean([tot_bfs(fam, prompt, v, 1, 1, rng).answer == (0, 0, 0) for _ in range(4000)])
        assert wins == pytest.approx(0.42, abs=0.03)

    def test_failure_bound(self):
        assert tot_failure_bound([0.6, 0.7], 0.0, 1) == pytest.approx(0.4 + 0.3)
        assert tot_failure_bound([0.6, 0.7], 0.1, 10) == pytest.approx(0.46**10 + 0.37**10)

    def test_prompt_threshold(self):
        assert tot_prompt_threshold(math.inf, 2, 2, 0.5, 0.05) == 0
        assert tot_prompt_threshold(0.1, 2, 2, 0.5, 0.05) == math.ceil((2 * math.log(4) + math.log(20)) / 0.1)

    def test_bad_beam(self, sym, rng):
        with pytest.raises(ValidationError):
            tot_bfs(sym, Prompt.from_trajectories([], 0, 2), ValueFunction({}), 1, 0, rng)


class TestSelectionInference:
    def test_json_round_trip(self, tmp_path):
        fam = default_si_family()
        path = tmp_path / "si.json"
        path.write_text(json.dumps(fam.to_dict()))
        back = SIFamily.load(path)
        assert back.to_dict() == fam.to_dict()
        assert fam.alphabet_size == 2 and fam.horizon == 2 and len(fam) == 2

    def test_rejects_bad_mask(self):
        d = default_si_family().to_dict()
        d["allowed_masks"][1].append([2])
        with pytest.raises(ValidationError):
            SIFamily.from_dict(d)

    def test_rejects_bad_selection(self):
        d = default_si_family().to_dict()
        d["tasks"][0]["selection"][1] = [0.5, 0.5, 0.5]
        with pytest.raises(ValidationError):
            SIFamily.from_dict(d)

    def test_answer_law_by_hand(self):
        fam = default_si_family()
        # S1 from z0 = 0: z1 ~ (.85, .15); then masks {0}, {1}, {0,1} with weights .2, .6, .2
        z1 = np.array([0.85, 0.15])
        step2 = 0.2 * np.array([0.85, 0.15]) + 0.6 * np.array([[0.9, 0.1], [0.2, 0.8]]) + 0.2 * np.array(
            [[0.95, 0.05], [0.5, 0.5]])
        np.testing.assert_allclose(si_answer_law(fam, 0, 0), z1 @ step2, atol=1e-14)

    def test_empty_prompt_posteriors_use_query_only(self):
        fam = default_si_family()
        w_se, w_in = si_posteriors(fam, SIPrompt((), (), 0))
        np.testing.assert_allclose(w_se, [0.7 / 1.3, 0.6 / 1.3])
        np.testing.assert_allclose(w_in, w_se)

    def test_predictive_matches_generation(self):
        fam = default_si_family()
        rng = np.random.default_rng(8)
        prompt = SIPrompt(((0, 0, 1), (1, 1, 1)), ((0, 2), (0, 1)), 0)
        q = si_predictive(fam, prompt)
        draws = [si_generate(fam, prompt, rng)[0][-1] for _ in range(6000)]
        assert np.mean(draws) == pytest.approx(q[1], abs=0.02)

    def test_error_shrinks_with_demos(self):
        fam = default_si_family()
        rng = np.random.default_rng(4)
        from cotbma.strategies import sample_si_prompt
        med = [np.median([si_prompting_error(fam, 0, sample_si_prompt(fam, 0, n, rng)) for _ in range(60)])
               for n in (1, 16)]
        assert med[1] < med[0]

    def test_separation(self):
        sep = si_separation(default_si_family(), 0)
        assert sep.lambda_q == pytest.approx(1 - math.sqrt(0.42) - math.sqrt(0.12), abs=1e-12)
        assert 0 < sep.lambda_s and 0 < sep.lambda_i
        assert sep.total == pytest.approx(sep.lambda_q + sep.lambda_s + sep.lambda_i)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_vote_winner_has_max_count(answers):
    res = majority_vote(answers, 5)
    assert res.counts[res.winner] == res.counts.max()
    assert all(res.counts[k] < res.counts.max() for k in range(res.winner))
