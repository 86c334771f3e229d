import numpy as np
import pytest

from firehard import make_sample, make_synthetic_dataset
from firehard.embedstore import EmbeddingStore
from firehard.model import (
    CheckpointError,
    ToyClassifier,
    TrainParams,
    TrainingDiverged,
    epoch_mean_losses,
    load_checkpoint,
    save_checkpoint,
    save_loss_history,
    softmax,
    train,
    word_importance,
)
from oracles import finite_difference_gradients, max_relative_error


def random_store(seed, n=40, d=12):
    rng = np.random.default_rng(seed)
    return EmbeddingStore([f"w{i}" for i in range(n)], rng.normal(size=(n, d)))


def random_model(seed, store=None, num_classes=3, is_pair=False, hidden=10):
    store = store or random_store(seed)
    model = ToyClassifier.init(store, num_classes, hidden_dim=hidden, is_pair=is_pair, seed=seed)
    # randomize the head so gradients are non-trivial
    rng = np.random.default_rng(seed + 1)
    model.w2[...] = rng.normal(size=model.w2.shape)
    model.b2[...] = rng.normal(size=model.b2.shape)
    model.b1[...] = rng.normal(0, 0.3, size=model.b1.shape)
    return model


def random_sample(seed, store, is_pair=False, n=7):
    rng = np.random.default_rng(seed)
    words = [store.words[i] for i in rng.integers(0, len(store), size=n)]
    if is_pair:
        k = n // 2 or 1
        return make_sample(" ".join(words[:k]) or words[0], " ".join(words[k:]) or words[-1], id=f"r{seed}")
    return make_sample(" ".join(words), id=f"r{seed}")


class TestForward:
    def test_zeroed_head_gives_uniform_logits(self, store):
        model = ToyClassifier.init(store, 3, seed=0)
        s = make_sample("the movie was wonderful", id="a")
        np.testing.assert_array_equal(model.forward(s), np.zeros(3))

    def test_permutation_invariance_within_text_a(self, baseline):
        a = make_sample("the movie was truly wonderful .", id="a")
        b = make_sample("wonderful truly the . was movie", id="b")
        np.testing.assert_array_equal(baseline.forward(a), baseline.forward(b))

    def test_oov_maps_to_reserved_row(self, baseline):
        a = make_sample("wholesome zzzunknownzzz", id="a")
        b = make_sample("wholesome <mask>", id="b")
        np.testing.assert_array_equal(baseline.forward(a), baseline.forward(b))

    def test_pair_sample_on_single_model_rejected(self, baseline):
        s = make_sample("one two", "three four", id="p")
        with pytest.raises(ValueError):
            baseline.forward(s)

    def test_softmax_sums_to_one(self, baseline, test_sent):
        for ls in test_sent.samples[:100]:
            probs = softmax(baseline.forward(ls.sample))
            assert probs.sum() == pytest.approx(1.0, abs=1e-6)


class TestForwardEmbeddings:
    def test_consistency_with_forward_bitwise(self, baseline, test_sent):
        rng = np.random.default_rng(0)
        picks = rng.choice(len(test_sent), size=100, replace=False)
        for i in picks:
            s = test_sent.samples[int(i)].sample
            rows, len_a = baseline.embed(s)
            via_rows = baseline.forward_embeddings(rows, len_a)
            np.testing.assert_array_equal(via_rows, baseline.forward(s))

    def test_pair_consistency_bitwise(self, pair_model, pair_train):
        for ls in pair_train.samples[:50]:
            rows, len_a = pair_model.embed(ls.sample)
            np.testing.assert_array_equal(
                pair_model.forward_embeddings(rows, len_a),
                pair_model.forward(ls.sample),
            )

    def test_all_zero_rows_finite(self, baseline):
        logits = baseline.forward_embeddings(np.zeros((5, baseline.d)))
        assert np.all(np.isfinite(logits))

    def test_dimension_mismatch(self, baseline):
        with pytest.raises(ValueError):
            baseline.forward_embeddings(np.zeros((4, baseline.d + 1)))

    def test_empty_input(self, baseline):
        with pytest.raises(ValueError):
            baseline.forward_embeddings(np.zeros((0, baseline.d)))

    def test_sigma_to_zero_converges(self, baseline, test_sent):
        s = test_sent.samples[0].sample
        rows, len_a = baseline.embed(s)
        base = baseline.forward(s)
        rng = np.random.default_rng(5)
        noise = rng.normal(size=rows.shape)
        gaps = []
        for sigma in (1e-3, 1e-6):
            gap = np.abs(baseline.forward_embeddings(rows + sigma * noise, len_a) - base).max()
            gaps.append(gap)
        assert gaps[1] < gaps[0] < 1e-1
        assert gaps[1] < 1e-4


class TestInputGradients:
    def test_zero_head_zero_gradient_at_oov_row(self, store):
        model = ToyClassifier.init(store, 2, seed=1)  # head starts zeroed
        s = make_sample("zzzoov the movie", id="z")
        grads = model.input_gradients(s, "predicted_class_logit")
        np.testing.assert_array_equal(grads[0], np.zeros(model.d))

    def test_loss_target_requires_label(self, baseline):
        s = make_sample("the movie was fine", id="x")
        with pytest.raises(ValueError):
            baseline.input_gradients(s, "loss_vs_label")

    def test_unknown_target(self, baseline):
        s = make_sample("the movie was fine", id="x")
        with pytest.raises(ValueError):
            baseline.input_gradients(s, "saliency")

    @pytest.mark.parametrize("target", ["loss_vs_label", "predicted_class_logit"])
    def test_finite_difference_oracle_20_pairs(self, target):
        worst = 0.0
        for trial in range(20):
            is_pair = trial % 2 == 1
            store = random_store(100 + trial)
            model = random_model(100 + trial, store, is_pair=is_pair)
            sample = random_sample(200 + trial, store, is_pair=is_pair)
            label = trial % model.num_classes
            rows, len_a = model.embed(sample)
            analytic = model.input_gradients(sample, target, label=label)

            if target == "loss_vs_label":
                def scalar(r):
                    probs = softmax(model.forward_embeddings(r, len_a))
                    return -float(np.log(probs[label]))
            else:
                j = int(np.argmax(model.forward_embeddings(rows, len_a)))

                def scalar(r):
                    return float(model.forward_embeddings(r, len_a)[j])

            numeric = finite_difference_gradients(scalar, rows, step=1e-4)
            worst = max(worst, max_relative_error(analytic, numeric))
        assert worst < 1e-3, f"max relative error {worst}"

    def test_crafted_signal_word_has_largest_gradient(self, baseline):
        # one class-signal token among neutral scaffolding, varied fillers
        from firehard.textcore import _INTENSIFIERS, _MOVIE_NOUNS, _POS_ADJ

        for g_i, group in enumerate(_POS_ADJ):
            noun = _MOVIE_NOUNS[g_i % 10][0]
            adv = _INTENSIFIERS[g_i % 4][0]
            s = make_sample(f"the {noun} was {adv} {group[0]} .", id=f"c{g_i}")
            grads = baseline.input_gradients(s, "predicted_class_logit")
            top = int(np.argmax(word_importance(grads)))
            assert s.surfaces()[top] == group[0]

    def test_word_importance_measures(self):
        g = np.array([[3.0, 4.0], [0.0, 1.0]])
        np.testing.assert_allclose(word_importance(g, "l2"), [5.0, 1.0])
        np.testing.assert_allclose(word_importance(g, "abs_max"), [4.0, 1.0])
        with pytest.raises(ValueError):
            word_importance(g, "sum")


class TestTrain:
    def test_identity_extender_bitwise(self, store):
        ds = make_synthetic_dataset(31, 120, "sentiment")
        params = TrainParams(epochs=2, batch_size=16, seed=4)
        m = ToyClassifier.init(store, 2, seed=3)
        plain, _ = train(m, ds, params)
        hooked, _ = train(m, ds, params, batch_extender=lambda batch, epoch, step: batch)
        for k in ("embeddings", "w1", "b1", "w2", "b2"):
            np.testing.assert_array_equal(getattr(plain, k), getattr(hooked, k))

    def test_loss_decreases(self, store):
        ds = make_synthetic_dataset(33, 400, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)
        _, history = train(m, ds, TrainParams(epochs=6, seed=4))
        means = epoch_mean_losses(history)
        assert means[-1] < means[0]
        drops = sum(b <= a + 1e-12 for a, b in zip(means, means[1:]))
        assert drops >= len(means) - 2

    def test_defaults_mirror_published_recipe(self):
        params = TrainParams()
        assert params.epochs == 5
        assert params.adam_epsilon == 1e-8
        assert params.weight_decay == 0.0

    def test_deterministic_given_seed(self, store, tmp_path):
        ds = make_synthetic_dataset(35, 150, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)
        a, _ = train(m, ds, TrainParams(epochs=2, seed=7))
        b, _ = train(m, ds, TrainParams(epochs=2, seed=7))
        pa, pb = tmp_path / "a.fbtc", tmp_path / "b.fbtc"
        save_checkpoint(a, pa)
        save_checkpoint(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_input_model_unchanged(self, store):
        ds = make_synthetic_dataset(36, 80, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)
        before = m.embeddings.copy()
        train(m, ds, TrainParams(epochs=1, seed=1))
        np.testing.assert_array_equal(m.embeddings, before)

    def test_reserved_row_stays_zero(self, baseline):
        np.testing.assert_array_equal(baseline.embeddings[0], np.zeros(baseline.d))

    def test_divergence_aborts_with_diagnostic(self, store):
        ds = make_synthetic_dataset(37, 60, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)
        with pytest.raises(TrainingDiverged, match="epoch"):
            train(m, ds, TrainParams(epochs=1, learning_rate=1e18, seed=1))

    def test_extra_labels_validated(self, store):
        ds = make_synthetic_dataset(38, 40, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)

        def bad_extender(batch, epoch, step):
            from firehard.textcore import LabeledSample

            return list(batch) + [LabeledSample(batch[0].sample, 7)]

        with pytest.raises(ValueError, match="label"):
            train(m, ds, TrainParams(epochs=1, seed=1), batch_extender=bad_extender)

    def test_loss_history_csv(self, store, tmp_path):
        ds = make_synthetic_dataset(39, 64, "sentiment")
        m = ToyClassifier.init(store, 2, seed=3)
        _, history = train(m, ds, TrainParams(epochs=1, batch_size=32, seed=1))
        p = tmp_path / "loss.csv"
        save_loss_history(history, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "epoch,step,loss"
        assert len(lines) == len(history) + 1


class TestCheckpoint:
    def test_round_trip_identical_logits_50_samples(self, baseline, test_sent, tmp_path):
        p = tmp_path / "m.fbtc"
        save_checkpoint(baseline, p)
        again = load_checkpoint(p)
        for ls in test_sent.samples[:50]:
            np.testing.assert_array_equal(
                again.forward(ls.sample), baseline.forward(ls.sample)
            )

    def test_truncated_file_checksum_error(self, baseline, tmp_path):
        p = tmp_path / "m.fbtc"
        save_checkpoint(baseline, p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(CheckpointError, match="checksum|truncated"):
            load_checkpoint(p)

    def test_corrupt_byte_checksum_error(self, baseline, tmp_path):
        p = tmp_path / "m.fbtc"
        save_checkpoint(baseline, p)
        raw = bytearray(p.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_version_mismatch_explicit(self, baseline, tmp_path):
        p = tmp_path / "m.fbtc"
        save_checkpoint(baseline, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 2  # bump the version field
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.fbtc"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_pair_model_round_trip(self, pair_model, pair_train, tmp_path):
        p = tmp_path / "p.fbtc"
        save_checkpoint(pair_model, p)
        again = load_checkpoint(p)
        for ls in pair_train.samples[:20]:
            np.testing.assert_array_equal(
                again.forward(ls.sample), pair_model.forward(ls.sample)
            )
