"""Best-found hyperparameter recipes for the full-scale MNLI task.

These mirror the tuned settings reported for the real benchmark models; at
desk scale they are starting points, not performance claims.
"""

from .ensemble import FiveParams
from .model import TrainParams
from .switch import SwitchParams

# 2 perturbed words, 10 candidates per word, POS matching, pool of 14 into the
# similarity filter (negatives dropped), at most 14 samples, logit averaging.
FUSE_MNLI_SWITCH = SwitchParams(
    words_to_perturb=2,
    candidates_per_word=10,
    pos_match=True,
    use_filter_mode="filter_positive",
    use_pool_multiplier=1,
    max_samples=14,
    gradient_target="predicted_class_logit",
)
FUSE_MNLI_VOTE_MODE = "logit_average"

# 1 perturbed embedding, sigma 8.14, 8 synthetic samples per original.
FIVE_MNLI = FiveParams(
    embeddings_to_perturb=1,
    samples_per_original=8,
    sigma=8.14,
    vote_mode="logit_average",
)

# batch size 7, 9 words to perturb, 10 candidates per word, POS matching,
# pool of 12 into the similarity filter, at most 4 injected samples.
FACT_MNLI_SWITCH = SwitchParams(
    words_to_perturb=9,
    candidates_per_word=10,
    pos_match=True,
    use_filter_mode="filter_positive",
    use_pool_multiplier=3,
    max_samples=4,
    gradient_target="loss_vs_label",
)
FACT_MNLI_TRAIN = TrainParams(batch_size=7)
