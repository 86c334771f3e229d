import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from firehard import (
    AttackParams,
    PosLexicon,
    SwitchEngine,
    ToyClassifier,
    TrainParams,
    build_adversarial_set,
    build_neighbor_index,
    make_fixture_store,
    make_synthetic_dataset,
    train,
)
from firehard.harness import filter_correct
from firehard.switch import default_stopwords


@pytest.fixture(scope="session")
def store():
    return make_fixture_store(0)


@pytest.fixture(scope="session")
def index(store):
    return build_neighbor_index(store, k=30)


@pytest.fixture(scope="session")
def lexicon():
    return PosLexicon.default()


@pytest.fixture(scope="session")
def stopwords():
    return default_stopwords()


@pytest.fixture(scope="session")
def train_sent():
    return make_synthetic_dataset(101, 2000, "sentiment")


@pytest.fixture(scope="session")
def test_sent():
    return make_synthetic_dataset(103, 500, "sentiment")


@pytest.fixture(scope="session")
def baseline(store, train_sent):
    model = ToyClassifier.init(store, 2, hidden_dim=32, seed=5)
    trained, _ = train(model, train_sent, TrainParams(epochs=5, seed=9))
    return trained


@pytest.fixture(scope="session")
def engine(baseline, store, index):
    return SwitchEngine(model=baseline, store=store, index=index)


@pytest.fixture(scope="session")
def pair_train():
    return make_synthetic_dataset(201, 900, "entailment")


@pytest.fixture(scope="session")
def pair_model(store, pair_train):
    model = ToyClassifier.init(store, 3, hidden_dim=32, is_pair=True, seed=6)
    trained, _ = train(model, pair_train, TrainParams(epochs=4, seed=10))
    return trained


@pytest.fixture(scope="session")
def adversarial_bundle(baseline, store, index, lexicon, test_sent):
    """Premade adversarial set against the baseline on its correct test subset."""
    correct = filter_correct(baseline.forward, test_sent)
    params = AttackParams(neighbors_per_word=15, seed=1)
    adv, results = build_adversarial_set(
        baseline.forward, store, index, lexicon, correct, params
    )
    return {"correct": correct, "adv": adv, "results": results, "params": params}
