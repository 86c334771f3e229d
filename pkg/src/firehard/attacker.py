"""Black-box word-substitution adversary with exact query accounting.

The attack establishes word importance by masking each content word and
measuring the drop in the originally-predicted class's probability, then
greedily tries embedding-neighbor replacements position by position, keeping
the candidate that hurts the classifier most, until the prediction flips or
candidates run out. Every classifier invocation is counted, importance probes
included. The attacker sees nothing but a sample -> logits callable, so
defended ensembles are attacked through exactly the same interface as plain
models.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .embedstore import EmbeddingStore, NeighborIndex, sentence_similarity
from .model import softmax
from .switch import PosLexicon, default_stopwords, eligible_positions
from .textcore import Dataset, LabeledSample, Sample, Token

ClassifierFn = Callable[[Sample], np.ndarray]

MASK_SURFACE = "<mask>"  # out-of-vocabulary on purpose: maps to the zero row

MASK_MODES = ("placeholder", "delete")


@dataclass(frozen=True)
class AttackParams:
    neighbors_per_word: int = 15
    min_sentence_similarity: float = 0.5
    pos_match: bool = True
    max_positions: Optional[int] = None
    seed: int = 0
    mask_mode: str = "placeholder"
    attack_both_segments: bool = False

    def __post_init__(self) -> None:
        if self.neighbors_per_word < 1:
            raise ValueError("neighbors_per_word must be >= 1")
        if self.max_positions is not None and self.max_positions < 0:
            raise ValueError("max_positions must be non-negative")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class AttackResult:
    original: LabeledSample
    adversarial: Optional[Sample]
    success: bool
    queries: int
    perturbed_positions: tuple[int, ...]
    perturbation_rate: float
    original_prediction: int
    final_prediction: int

    def __post_init__(self) -> None:
        if self.success and self.adversarial is None:
            raise ValueError("successful attack must carry an adversarial sample")
        if self.success and self.final_prediction == self.original_prediction:
            raise ValueError("successful attack must flip the prediction")
        if self.queries < 0 or not 0.0 <= self.perturbation_rate <= 1.0:
            raise ValueError("query count / perturbation rate out of range")

    def to_dict(self) -> dict:
        return {
            "parent_id": self.original.sample.id,
            "success": self.success,
            "queries": self.queries,
            "perturbed_positions": list(self.perturbed_positions),
            "perturbation_rate": self.perturbation_rate,
            "original_prediction": self.original_prediction,
            "final_prediction": self.final_prediction,
        }


class QueryCounter:
    """Counting wrapper for a classifier; one increment per invocation."""

    def __init__(self, fn: ClassifierFn):
        self.fn = fn
        self.count = 0

    def __call__(self, sample: Sample) -> np.ndarray:
        self.count += 1
        return self.fn(sample)


def _masked(sample: Sample, position: int, mode: str) -> Optional[Sample]:
    if mode == "placeholder":
        return sample.with_token(position, Token(MASK_SURFACE))
    # delete mode: drop the token, unless that would empty its segment
    tokens = list(sample.tokens())
    boundary = sample.boundary
    if position < boundary:
        if boundary == 1:
            return None
        a = tuple(tokens[:position] + tokens[position + 1 : boundary])
        return Sample(a, sample.text_b, sample.id)
    if len(tokens) - boundary == 1:
        return None
    b = tuple(tokens[boundary:position] + tokens[position + 1 :])
    return Sample(sample.text_a, b, sample.id)


def _rank_by_mask_drop(
    classifier_fn: ClassifierFn,
    sample: Sample,
    positions: Sequence[int],
    orig_class: int,
    p_orig: float,
    mask_mode: str,
) -> list[int]:
    drops = []
    for pos in positions:
        masked = _masked(sample, pos, mask_mode)
        if masked is None:
            continue
        p = float(softmax(classifier_fn(masked))[orig_class])
        drops.append((pos, p_orig - p))
    drops.sort(key=lambda t: (-t[1], t[0]))
    return [pos for pos, _ in drops]


def mask_importance(
    classifier_fn: ClassifierFn,
    sample: Sample,
    stopwords: Optional[frozenset[str]] = None,
    mask_mode: str = "placeholder",
    attack_both_segments: bool = False,
) -> list[int]:
    """Content-word positions ordered by how much masking them hurts the
    originally-predicted class (ties by ascending position).

    Costs 1 query for the original plus one per eligible position.
    """
    if stopwords is None:
        stopwords = default_stopwords()
    logits = classifier_fn(sample)
    orig = int(np.argmax(logits))
    p_orig = float(softmax(logits)[orig])
    positions = eligible_positions(
        sample, stopwords, include_text_a=attack_both_segments
    )
    return _rank_by_mask_drop(
        classifier_fn, sample, positions, orig, p_orig, mask_mode
    )


def attack(
    classifier_fn: ClassifierFn,
    store: EmbeddingStore,
    index: NeighborIndex,
    pos_lexicon: PosLexicon,
    labeled_sample: LabeledSample,
    params: AttackParams,
    stopwords: Optional[frozenset[str]] = None,
) -> AttackResult:
    """Greedy importance-ordered substitution attack on one sample.

    Targets whatever the classifier currently predicts; failure is a result,
    not an error.
    """
    if stopwords is None:
        stopwords = default_stopwords()
    if params.neighbors_per_word > index.k:
        raise ValueError(
            f"neighbors_per_word {params.neighbors_per_word} exceeds index k {index.k}"
        )
    counter = QueryCounter(classifier_fn)
    sample = labeled_sample.sample
    logits = counter(sample)
    orig_pred = int(np.argmax(logits))
    p_current = float(softmax(logits)[orig_pred])

    content = eligible_positions(
        sample, stopwords, include_text_a=params.attack_both_segments
    )
    ranked = _rank_by_mask_drop(
        counter, sample, content, orig_pred, p_current, params.mask_mode
    )
    if params.max_positions is not None:
        ranked = ranked[: params.max_positions]

    original_surfaces = sample.surfaces()
    current = sample
    perturbed: list[int] = []
    success = False
    final_pred = orig_pred

    for pos in ranked:
        word = sample.tokens()[pos].surface
        wid = store.word_id(word)
        if wid is None:
            continue
        ids = index.row_ids(wid)[: params.neighbors_per_word]
        candidates = [store.words[i] for i in ids]
        if params.pos_match:
            want = pos_lexicon.tag(word)
            candidates = [w for w in candidates if pos_lexicon.tag(w) == want]
        trials: list[tuple[float, int, Sample]] = []
        flips: list[tuple[float, int, Sample]] = []
        for cand in candidates:
            trial = current.with_token(pos, Token(cand, store.word_id(cand)))
            sim = sentence_similarity(store, original_surfaces, trial.surfaces())
            if sim < params.min_sentence_similarity:
                continue
            t_logits = counter(trial)
            t_pred = int(np.argmax(t_logits))
            t_p = float(softmax(t_logits)[orig_pred])
            entry = (t_p, t_pred, trial)
            trials.append(entry)
            if t_pred != orig_pred:
                flips.append(entry)
        if flips:
            t_p, t_pred, trial = min(flips, key=lambda e: e[0])
            current = trial
            perturbed.append(pos)
            success = True
            final_pred = t_pred
            break
        if trials:
            t_p, t_pred, trial = min(trials, key=lambda e: e[0])
            if t_p < p_current:
                current = trial
                p_current = t_p
                perturbed.append(pos)

    adversarial = None
    if success:
        adversarial = Sample(current.text_a, current.text_b, f"{sample.id}-adv")
    rate = len(perturbed) / len(content) if content else 0.0
    return AttackResult(
        original=labeled_sample,
        adversarial=adversarial,
        success=success,
        queries=counter.count,
        perturbed_positions=tuple(sorted(perturbed)),
        perturbation_rate=rate,
        original_prediction=orig_pred,
        final_prediction=final_pred,
    )


def build_adversarial_set(
    classifier_fn: ClassifierFn,
    store: EmbeddingStore,
    index: NeighborIndex,
    pos_lexicon: PosLexicon,
    dataset: Dataset,
    params: AttackParams,
    stopwords: Optional[frozenset[str]] = None,
    workers: int = 1,
) -> tuple[Dataset, list[AttackResult]]:
    """Attack every sample; keep the successful adversarials as a new Dataset.

    Adversarial samples carry the parent's gold label and a parent-derived id;
    the full per-sample result table comes back alongside for reporting.
    """

    def one(ls: LabeledSample) -> AttackResult:
        return attack(
            classifier_fn, store, index, pos_lexicon, ls, params, stopwords=stopwords
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, dataset.samples))
    else:
        results = [one(ls) for ls in dataset.samples]

    adversarials = tuple(
        LabeledSample(r.adversarial, r.original.label)
        for r in results
        if r.success and r.adversarial is not None
    )
    adv_dataset = Dataset(
        adversarials, dataset.num_classes, dataset.class_names, dataset.is_pair
    )
    return adv_dataset, results


def save_attack_results(results: Sequence[AttackResult], path: str | Path) -> None:
    payload = {"results": [r.to_dict() for r in results]}
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_attack_results(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))["results"]
