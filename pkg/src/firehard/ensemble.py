"""Evaluation-time defenses: diversify each sample into a batch and vote.

FuSE builds the batch by word substitution through the perturbation engine;
FIVE builds it by adding Gaussian noise to the most important input-embedding
rows. Both include the original as a member and combine member outputs by
majority vote, logit averaging, or probability averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ToyClassifier, softmax
from .switch import SwitchEngine, SwitchParams
from .textcore import Sample

VOTE_MODES = ("majority_vote", "logit_average", "probability_average")


@dataclass(frozen=True)
class FiveParams:
    embeddings_to_perturb: int = 1
    samples_per_original: int = 8
    sigma: float = 1.0
    vote_mode: str = "logit_average"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embeddings_to_perturb < 0:
            raise ValueError("embeddings_to_perturb must be >= 0")
        if self.samples_per_original < 1:
            raise ValueError("samples_per_original must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.vote_mode not in VOTE_MODES:
            raise ValueError(f"vote_mode must be one of {VOTE_MODES}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class EnsembleVerdict:
    final_logits: np.ndarray
    per_member_predictions: tuple[int, ...]
    member_count: int

    def __post_init__(self) -> None:
        if self.member_count != len(self.per_member_predictions):
            raise ValueError("member_count must match per_member_predictions")
        if self.member_count < 1:
            raise ValueError("ensemble needs at least the original member")

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.final_logits))


def combine(
    verdict_inputs: Sequence[np.ndarray], mode: str, num_classes: int
) -> np.ndarray:
    """Reduce member logits to synthetic logits per the voting mode.

    majority_vote returns normalized per-class vote counts; a tied vote falls
    back to averaging the raw logits of the tied classes' supporters.
    """
    if mode not in VOTE_MODES:
        raise ValueError(f"mode must be one of {VOTE_MODES}")
    members = [np.asarray(v, dtype=np.float64) for v in verdict_inputs]
    if not members:
        raise ValueError("verdict_inputs must be non-empty")
    for v in members:
        if v.shape != (num_classes,):
            raise ValueError(
                f"member logits shape {v.shape} != ({num_classes},)"
            )
    identical = all(np.array_equal(v, members[0]) for v in members[1:])
    if mode == "logit_average":
        # mean of identical members is the member itself, exactly
        return members[0].copy() if identical else np.mean(members, axis=0)
    if mode == "probability_average":
        if identical:
            mean = softmax(members[0])
        else:
            mean = np.mean([softmax(v) for v in members], axis=0)
        # keep synthetic logits finite even when a class underflows to 0
        return np.log(np.maximum(mean, 1e-300))
    preds = np.array([int(np.argmax(v)) for v in members])
    counts = np.bincount(preds, minlength=num_classes).astype(np.float64)
    top = counts.max()
    tied = np.nonzero(counts == top)[0]
    if len(tied) == 1:
        return counts / len(members)
    supporters = [v for v, p in zip(members, preds) if p in set(tied.tolist())]
    return np.mean(supporters, axis=0)


def _verdict(member_logits: list[np.ndarray], mode: str, num_classes: int) -> EnsembleVerdict:
    preds = tuple(int(np.argmax(v)) for v in member_logits)
    if len(member_logits) == 1:
        final = member_logits[0].copy()
    else:
        final = combine(member_logits, mode, num_classes)
    return EnsembleVerdict(final, preds, len(member_logits))


def fuse_classify(
    base_model: ToyClassifier,
    switch_engine: SwitchEngine,
    sample: Sample,
    switch_params: SwitchParams,
    mode: str,
) -> EnsembleVerdict:
    """Classify the original plus its word-substituted alternatives and combine."""
    member_logits = [base_model.forward(sample)]
    for alt in switch_engine.generate_alternatives(sample, switch_params):
        member_logits.append(base_model.forward(alt))
    return _verdict(member_logits, mode, base_model.num_classes)


def five_member_rows(
    rows: np.ndarray,
    positions: Sequence[int],
    sigma: float,
    seed: int,
    member_index: int,
) -> np.ndarray:
    """One synthetic member: i.i.d. Gaussian noise on the selected rows.

    Member noise derives from (seed, member_index) alone, so members can be
    generated in any order or in parallel with identical results.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(member_index),))
    )
    out = np.array(rows, dtype=np.float64, copy=True)
    for p in positions:
        out[p] = out[p] + rng.normal(0.0, sigma, size=out.shape[1])
    return out


def five_classify(
    base_model: ToyClassifier,
    switch_engine: SwitchEngine,
    sample: Sample,
    five_params: FiveParams,
) -> EnsembleVerdict:
    """Classify the original plus Gaussian-perturbed embedding variants and combine.

    Perturbed positions are fixed per sample (the most important words by the
    engine's gradient ranking); only the noise is re-drawn per member.
    """
    ranking_params = SwitchParams(
        words_to_perturb=max(1, five_params.embeddings_to_perturb),
        candidates_per_word=1,
        pos_match=False,
        use_filter_mode="off",
        use_pool_multiplier=1,
        max_samples=1,
        gradient_target="predicted_class_logit",
        seed=0,
    )
    ranked = switch_engine.rank_important_words(sample, ranking_params)
    positions = ranked[: five_params.embeddings_to_perturb]
    rows, len_a = base_model.embed(sample)
    member_logits = [base_model.forward_embeddings(rows, len_a)]
    for mi in range(five_params.samples_per_original):
        noisy = five_member_rows(
            rows, positions, five_params.sigma, five_params.seed, mi
        )
        member_logits.append(base_model.forward_embeddings(noisy, len_a))
    return _verdict(member_logits, five_params.vote_mode, base_model.num_classes)
