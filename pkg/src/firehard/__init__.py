"""firehard: desk-scale hardening toolkit for word-substitution attacks."""

from .attacker import AttackParams, AttackResult, QueryCounter, attack, build_adversarial_set, mask_importance
from .embedstore import (
    EmbeddingStore,
    NeighborIndex,
    build_neighbor_index,
    load_embeddings,
    make_fixture_store,
    neighbors,
    sentence_similarity,
    sentence_vector,
)
from .ensemble import EnsembleVerdict, FiveParams, combine, five_classify, fuse_classify
from .fact import FactParams, fact_batch_extender, fact_train
from .harness import (
    AnalysisParams,
    AttackReport,
    EvalReport,
    SearchSpace,
    emit_neighborhood_analysis,
    evaluate,
    random_search,
    run_experiment,
)
from .model import ToyClassifier, TrainParams, load_checkpoint, save_checkpoint, train
from .switch import (
    PosLexicon,
    SwitchEngine,
    SwitchParams,
    candidate_words,
    generate_alternatives,
    rank_important_words,
)
from .textcore import (
    Dataset,
    LabeledSample,
    Sample,
    Token,
    load_tsv,
    make_sample,
    make_synthetic_dataset,
    save_tsv,
    synthetic_label_oracle,
    tokenize,
)

__version__ = "0.1.0"
