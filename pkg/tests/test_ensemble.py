import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from firehard import make_sample
from firehard.ensemble import (
    EnsembleVerdict,
    FiveParams,
    combine,
    five_classify,
    five_member_rows,
    fuse_classify,
)
from firehard.model import softmax
from firehard.presets import FIVE_MNLI, FUSE_MNLI_SWITCH, FUSE_MNLI_VOTE_MODE
from firehard.switch import SwitchEngine, SwitchParams
from oracles import majority_winner


def logits_with_argmax(rng, c, winner):
    v = rng.normal(size=c)
    v[winner] = v.max() + rng.uniform(0.1, 1.0)
    return v


class TestCombine:
    def test_unanimous_majority_vote(self):
        members = [np.array([0.1, 2.0, 0.3])] * 5
        out = combine(members, "majority_vote", 3)
        np.testing.assert_allclose(out, [0, 1, 0])

    def test_logit_average_mean(self):
        out = combine([np.array([2.0, 0.0]), np.array([0.0, 2.0])], "logit_average", 2)
        np.testing.assert_allclose(out, [1.0, 1.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            combine([], "logit_average", 2)

    def test_class_count_mismatch(self):
        with pytest.raises(ValueError):
            combine([np.zeros(3), np.zeros(2)], "logit_average", 3)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            combine([np.zeros(2)], "plurality", 2)

    def test_majority_vote_counts_are_normalized(self):
        rng = np.random.default_rng(0)
        members = [logits_with_argmax(rng, 3, w) for w in (0, 0, 1)]
        out = combine(members, "majority_vote", 3)
        np.testing.assert_allclose(out, [2 / 3, 1 / 3, 0.0])

    def test_majority_exhaustive_up_to_9_members_4_classes(self):
        rng = np.random.default_rng(1)
        for m in range(1, 10):
            for c in range(2, 5):
                for counts in itertools.product(range(m + 1), repeat=c):
                    if sum(counts) != m:
                        continue
                    votes = [k for k, n in enumerate(counts) for _ in range(n)]
                    members = [logits_with_argmax(rng, c, v) for v in votes]
                    out = combine(members, "majority_vote", c)
                    winner, tied = majority_winner(members)
                    if len(tied) == 1:
                        assert int(np.argmax(out)) == winner
                    else:
                        # tie rule: average raw logits of the tied classes' supporters
                        supporters = [
                            v for v in members if int(np.argmax(v)) in tied
                        ]
                        expect = np.mean(supporters, axis=0)
                        np.testing.assert_allclose(out, expect)

    def test_majority_randomized_trials(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            m = int(rng.integers(1, 12))
            c = int(rng.integers(2, 5))
            members = [rng.normal(size=c) for _ in range(m)]
            out = combine(members, "majority_vote", c)
            winner, tied = majority_winner(members)
            if len(tied) == 1:
                assert int(np.argmax(out)) == winner
            else:
                # declared tie rule: mean raw logits of the tied classes' supporters
                supporters = [v for v in members if int(np.argmax(v)) in tied]
                np.testing.assert_allclose(out, np.mean(supporters, axis=0))

    def test_logit_average_matches_mean_1e9(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            members = [rng.normal(size=4) * 10 for _ in range(int(rng.integers(1, 9)))]
            out = combine(members, "logit_average", 4)
            np.testing.assert_allclose(out, np.mean(members, axis=0), atol=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_logit_average_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        members = [rng.normal(size=3) for _ in range(6)]
        a = combine(members, "logit_average", 3)
        perm = [members[i] for i in rng.permutation(6)]
        b = combine(perm, "logit_average", 3)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_probability_average_log_domain(self):
        rng = np.random.default_rng(4)
        members = [rng.normal(size=3) for _ in range(5)]
        out = combine(members, "probability_average", 3)
        mean_probs = np.mean([softmax(v) for v in members], axis=0)
        np.testing.assert_allclose(softmax(out), mean_probs, atol=1e-12)
        assert softmax(out).sum() == pytest.approx(1.0, abs=1e-6)

    def test_duplicate_member_shifts_one_vote(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            m = int(rng.integers(1, 9))
            members = [rng.normal(size=3) for _ in range(m)]
            dup = members[int(rng.integers(m))]
            before = np.bincount([int(np.argmax(v)) for v in members], minlength=3)
            after = np.bincount(
                [int(np.argmax(v)) for v in members + [dup]], minlength=3
            )
            diff = after - before
            assert diff.sum() == 1 and diff.max() == 1 and diff.min() == 0
            assert diff[int(np.argmax(dup))] == 1


class TestFiveParams:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"embeddings_to_perturb": -1},
            {"samples_per_original": 0},
            {"sigma": -0.5},
            {"vote_mode": "mean"},
            {"seed": -1},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            FiveParams(**kwargs)


class TestVerdict:
    def test_member_count_consistency(self):
        with pytest.raises(ValueError):
            EnsembleVerdict(np.zeros(2), (0, 1), 3)
        with pytest.raises(ValueError):
            EnsembleVerdict(np.zeros(2), (), 0)


class TestFuseClassify:
    def test_no_alternatives_equals_plain_forward(self, baseline, engine, test_sent):
        params = SwitchParams(words_to_perturb=0)
        for ls in test_sent.samples[:50]:
            verdict = fuse_classify(baseline, engine, ls.sample, params, "majority_vote")
            assert verdict.member_count == 1
            np.testing.assert_array_equal(
                verdict.final_logits, baseline.forward(ls.sample)
            )

    def test_member_bound_500_runs(self, baseline, engine, test_sent):
        params = SwitchParams(
            words_to_perturb=2, candidates_per_word=10, max_samples=6, seed=1
        )
        for ls in test_sent.samples[:500]:
            verdict = fuse_classify(baseline, engine, ls.sample, params, "logit_average")
            assert 1 <= verdict.member_count <= 1 + params.max_samples
            assert len(verdict.per_member_predictions) == verdict.member_count

    def test_entailment_recipe_smoke(self, pair_model, store, index):
        # tuned full-scale recipe: 2 words, 10 candidates/word, POS matching,
        # pool of 14 into the filter, max 14 samples, logit averaging
        assert FUSE_MNLI_SWITCH.words_to_perturb == 2
        assert FUSE_MNLI_SWITCH.candidates_per_word == 10
        assert FUSE_MNLI_SWITCH.pos_match is True
        assert FUSE_MNLI_SWITCH.use_filter_mode == "filter_positive"
        assert FUSE_MNLI_SWITCH.max_samples == 14
        assert FUSE_MNLI_SWITCH.use_pool_multiplier * FUSE_MNLI_SWITCH.max_samples == 14
        engine = SwitchEngine(model=pair_model, store=store, index=index)
        s = make_sample("the cats watch the dogs .", "the felines observe the dogs .", id="p")
        verdict = fuse_classify(pair_model, engine, s, FUSE_MNLI_SWITCH, FUSE_MNLI_VOTE_MODE)
        assert verdict.member_count <= 15
        assert np.all(np.isfinite(verdict.final_logits))


class TestFiveClassify:
    def test_sigma_zero_identity(self, baseline, engine, test_sent):
        for mode in ("majority_vote", "logit_average", "probability_average"):
            params = FiveParams(
                embeddings_to_perturb=2, samples_per_original=4, sigma=0.0,
                vote_mode=mode, seed=1,
            )
            for ls in test_sent.samples[:30]:
                verdict = five_classify(baseline, engine, ls.sample, params)
                plain = baseline.forward(ls.sample)
                assert verdict.prediction == int(np.argmax(plain))
                assert all(
                    p == int(np.argmax(plain)) for p in verdict.per_member_predictions
                )
                if mode == "logit_average":
                    np.testing.assert_array_equal(verdict.final_logits, plain)
                if mode == "probability_average":
                    np.testing.assert_allclose(
                        softmax(verdict.final_logits), softmax(plain), atol=1e-12
                    )

    def test_entailment_recipe_params(self):
        # tuned full-scale recipe: 1 perturbed embedding, sigma 8.14, 8 samples
        assert FIVE_MNLI.embeddings_to_perturb == 1
        assert FIVE_MNLI.sigma == pytest.approx(8.14)
        assert FIVE_MNLI.samples_per_original == 8
        assert FIVE_MNLI.vote_mode == "logit_average"

    def test_member_count(self, baseline, engine, test_sent):
        params = FiveParams(samples_per_original=6, sigma=1.0, seed=2)
        verdict = five_classify(baseline, engine, test_sent.samples[0].sample, params)
        assert verdict.member_count == 7

    def test_deterministic_per_seed(self, baseline, engine, test_sent):
        params = FiveParams(samples_per_original=5, sigma=2.0, seed=3)
        s = test_sent.samples[1].sample
        a = five_classify(baseline, engine, s, params)
        b = five_classify(baseline, engine, s, params)
        np.testing.assert_array_equal(a.final_logits, b.final_logits)
        c = five_classify(baseline, engine, s, FiveParams(
            samples_per_original=5, sigma=2.0, seed=4))
        assert not np.array_equal(a.final_logits, c.final_logits)

    def test_member_rows_only_touch_selected_positions(self, baseline, test_sent):
        rows, _ = baseline.embed(test_sent.samples[0].sample)
        noisy = five_member_rows(rows, [2], sigma=1.5, seed=0, member_index=3)
        n = rows.shape[0]
        for i in range(n):
            if i == 2:
                assert not np.array_equal(noisy[i], rows[i])
            else:
                np.testing.assert_array_equal(noisy[i], rows[i])

    def test_noise_calibration_10k_members(self):
        d = 8
        sigma = 1.7
        rows = np.zeros((3, d))
        draws = np.empty((10_000, d))
        for mi in range(10_000):
            draws[mi] = five_member_rows(rows, [1], sigma, seed=11, member_index=mi)[1]
        mean = draws.mean(axis=0)
        std = draws.std(axis=0, ddof=1)
        assert np.abs(mean).max() <= 0.02 * sigma
        assert np.abs(std - sigma).max() <= 0.02 * sigma

    def test_order_independence_of_members(self, baseline, test_sent):
        rows, _ = baseline.embed(test_sent.samples[0].sample)
        a = five_member_rows(rows, [0, 1], 2.0, seed=5, member_index=7)
        b = five_member_rows(rows, [0, 1], 2.0, seed=5, member_index=7)
        np.testing.assert_array_equal(a, b)
