import time

import numpy as np
import pytest

from firehard import make_synthetic_dataset
from firehard.fact import FactParams, fact_batch_extender, fact_train
from firehard.model import ToyClassifier, TrainParams, load_checkpoint, save_checkpoint, train
from firehard.switch import SwitchParams


@pytest.fixture()
def small_ds():
    return make_synthetic_dataset(61, 120, "sentiment")


def fact_params(**overrides):
    sw = dict(
        words_to_perturb=2,
        candidates_per_word=10,
        pos_match=True,
        use_filter_mode="filter_positive",
        max_samples=4,
        seed=5,
    )
    sw.update(overrides.pop("switch", {}))
    tp = dict(epochs=1, batch_size=16, seed=3)
    tp.update(overrides.pop("train", {}))
    return FactParams(SwitchParams(**sw), TrainParams(**tp))


class TestFactBatchExtender:
    def test_no_alternatives_passthrough(self, engine, small_ds):
        params = fact_params(switch={"words_to_perturb": 0})
        batch = list(small_ds.samples[:6])
        assert fact_batch_extender(engine, batch, params) == batch

    def test_parent_adjacent_ordering_and_size(self, engine, small_ds):
        params = fact_params()
        batch = list(small_ds.samples[:2])
        extended = fact_batch_extender(engine, batch, params)
        assert len(extended) <= 2 * (1 + params.switch_params.max_samples)
        # first element is parent 1, its alternatives precede parent 2
        assert extended[0] == batch[0]
        idx2 = extended.index(batch[1])
        for inj in extended[1:idx2]:
            assert inj.sample.id.startswith(batch[0].sample.id)
        for inj in extended[idx2 + 1 :]:
            assert inj.sample.id.startswith(batch[1].sample.id)

    def test_label_audit_1000_injections(self, engine, small_ds):
        params = fact_params(switch={"max_samples": 6, "words_to_perturb": 3})
        injected = 0
        parents = {ls.sample.id: ls.label for ls in small_ds.samples}
        epoch = 0
        while injected < 1000:
            for step, start in enumerate(range(0, len(small_ds), 16)):
                batch = list(small_ds.samples[start : start + 16])
                extended = fact_batch_extender(
                    engine, batch, params, epoch=epoch, step=step
                )
                for ls in extended:
                    if ls in batch:
                        continue
                    parent_id = ls.sample.id.split("~")[0]
                    assert ls.label == parents[parent_id]
                    injected += 1
            epoch += 1
        assert injected >= 1000

    def test_fresh_subseeds_per_epoch(self, engine, small_ds):
        params = fact_params()
        batch = list(small_ds.samples[:3])
        e0 = fact_batch_extender(engine, batch, params, epoch=0, step=0)
        e0_again = fact_batch_extender(engine, batch, params, epoch=0, step=0)
        e1 = fact_batch_extender(engine, batch, params, epoch=1, step=0)
        assert [ls.sample.surfaces() for ls in e0] == [
            ls.sample.surfaces() for ls in e0_again
        ]
        assert [ls.sample.surfaces() for ls in e0] != [
            ls.sample.surfaces() for ls in e1
        ]

    def test_empty_batch_rejected(self, engine):
        with pytest.raises(ValueError):
            fact_batch_extender(engine, [], fact_params())


class TestFactRecipe:
    def test_entailment_recipe_params(self):
        # tuned full-scale recipe: batch size 7, 9 words to perturb, 10
        # candidates per word, POS matching, pool of 12 into the filter, max 4
        from firehard.presets import FACT_MNLI_SWITCH, FACT_MNLI_TRAIN

        assert FACT_MNLI_TRAIN.batch_size == 7
        assert FACT_MNLI_SWITCH.words_to_perturb == 9
        assert FACT_MNLI_SWITCH.candidates_per_word == 10
        assert FACT_MNLI_SWITCH.pos_match is True
        assert FACT_MNLI_SWITCH.use_filter_mode == "filter_positive"
        assert FACT_MNLI_SWITCH.max_samples == 4
        assert (
            FACT_MNLI_SWITCH.use_pool_multiplier * FACT_MNLI_SWITCH.max_samples == 12
        )


class TestFactTrain:
    def test_disabled_extender_bitwise_identical(self, store, engine, small_ds, tmp_path):
        params = fact_params(switch={"words_to_perturb": 0}, train={"epochs": 2})
        m0 = ToyClassifier.init(store, 2, seed=8)
        hardened, _ = fact_train(m0, small_ds, params, engine)
        plain, _ = train(m0, small_ds, params.train_params)
        pa, pb = tmp_path / "fact.fbtc", tmp_path / "plain.fbtc"
        save_checkpoint(hardened, pa)
        save_checkpoint(plain, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_checkpoint_format_identical_to_plain(self, baseline, engine, small_ds, tmp_path):
        params = fact_params()
        hardened, history = fact_train(baseline, small_ds, params, engine)
        p = tmp_path / "fact.fbtc"
        save_checkpoint(hardened, p)
        again = load_checkpoint(p)  # loads through the standard path
        s = small_ds.samples[0].sample
        np.testing.assert_array_equal(again.forward(s), hardened.forward(s))
        assert history  # loss history present

    def test_deterministic(self, baseline, engine, small_ds, tmp_path):
        params = fact_params()
        a, _ = fact_train(baseline, small_ds, params, engine)
        b, _ = fact_train(baseline, small_ds, params, engine)
        pa, pb = tmp_path / "a.fbtc", tmp_path / "b.fbtc"
        save_checkpoint(a, pa)
        save_checkpoint(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_forward_latency_parity(self, baseline, engine, small_ds, tmp_path):
        # hardened checkpoints are format-identical: same forward cost shape
        params = fact_params()
        hardened, _ = fact_train(baseline, small_ds, params, engine)
        samples = [ls.sample for ls in small_ds.samples[:60]]

        def clock(model):
            model.forward(samples[0])  # warm up
            t0 = time.perf_counter()
            for s in samples:
                model.forward(s)
            return time.perf_counter() - t0

        t_plain = min(clock(baseline) for _ in range(3))
        t_fact = min(clock(hardened) for _ in range(3))
        assert t_fact < 5 * t_plain
