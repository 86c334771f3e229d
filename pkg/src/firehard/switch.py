"""Shared perturbation engine: rank words by gradient, substitute via neighbors.

The pipeline: score token positions by input-gradient norm on the engine's own
model, pull candidate replacements for the top positions from the precomputed
neighbor matrix, optionally keep only part-of-speech matches, draw one
candidate per position at random (seeded) to form a pool of alternative
samples, then filter or rank the pool by sentence similarity.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import textcore
from .embedstore import EmbeddingStore, NeighborIndex, sentence_similarity
from .model import GRADIENT_TARGETS, ToyClassifier, word_importance
from .textcore import Sample, Token

POS_TAGS = frozenset({"NOUN", "VERB", "ADJ", "ADV", "OTHER"})
FILTER_MODES = ("off", "filter_positive", "rank")


@dataclass(frozen=True)
class SwitchParams:
    words_to_perturb: int = 2
    candidates_per_word: int = 10
    pos_match: bool = True
    use_filter_mode: str = "filter_positive"
    use_pool_multiplier: int = 1
    max_samples: int = 8
    gradient_target: str = "loss_vs_label"
    seed: int = 0
    # pair tasks perturb only the hypothesis unless this is set
    perturb_both_segments: bool = False

    def __post_init__(self) -> None:
        if self.words_to_perturb < 0:
            raise ValueError("words_to_perturb must be >= 0")
        if self.candidates_per_word < 1:
            raise ValueError("candidates_per_word must be >= 1")
        if self.use_pool_multiplier < 1 or self.max_samples < 1:
            raise ValueError("use_pool_multiplier and max_samples must be >= 1")
        if self.use_filter_mode not in FILTER_MODES:
            raise ValueError(f"use_filter_mode must be one of {FILTER_MODES}")
        if self.gradient_target not in GRADIENT_TARGETS:
            raise ValueError(f"gradient_target must be one of {GRADIENT_TARGETS}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


class PosLexicon:
    """Total word -> coarse tag map (OTHER for anything unknown)."""

    def __init__(self, tags: Mapping[str, str]):
        bad = {t for t in tags.values()} - POS_TAGS
        if bad:
            raise ValueError(f"unknown POS tags: {sorted(bad)}")
        self._tags = dict(tags)

    def tag(self, word: str) -> str:
        return self._tags.get(word, "OTHER")

    def __len__(self) -> int:
        return len(self._tags)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "PosLexicon":
        tags = {}
        for lineno, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}: line {lineno}: expected `word<TAB>TAG`")
            tags[cols[0]] = cols[1]
        return cls(tags)

    @classmethod
    def default(cls) -> "PosLexicon":
        return cls(textcore.WORD_TAGS)


def load_stopwords(path: str | Path) -> frozenset[str]:
    words = Path(path).read_text(encoding="utf-8").split()
    return frozenset(words)


@functools.cache
def default_stopwords() -> frozenset[str]:
    text = (resources.files("firehard") / "data" / "stopwords.txt").read_text("utf-8")
    return frozenset(text.split())


def is_punctuation(surface: str) -> bool:
    return not any(ch.isalnum() for ch in surface)


def eligible_positions(
    sample: Sample,
    stopwords: frozenset[str],
    vocab: Optional[Mapping[str, int]] = None,
    include_text_a: bool = True,
) -> list[int]:
    """Content-word positions: no stopwords, no punctuation, optionally in-vocab.

    For pair samples `include_text_a=False` restricts to hypothesis positions.
    """
    tokens = sample.tokens()
    start = 0 if include_text_a or not sample.is_pair else sample.boundary
    out = []
    for i in range(start, len(tokens)):
        s = tokens[i].surface
        if s in stopwords or is_punctuation(s):
            continue
        if vocab is not None and s not in vocab:
            continue
        out.append(i)
    return out


def rank_important_words(
    switch_model: ToyClassifier,
    sample: Sample,
    params: SwitchParams,
    stopwords: Optional[frozenset[str]] = None,
    label: Optional[int] = None,
    measure: str = "l2",
) -> list[int]:
    """Eligible positions sorted by descending gradient norm (ties by position)."""
    if stopwords is None:
        stopwords = default_stopwords()
    eligible = eligible_positions(
        sample,
        stopwords,
        vocab=switch_model.vocab,
        include_text_a=params.perturb_both_segments,
    )
    if not eligible:
        return []
    target = params.gradient_target
    if target == "loss_vs_label" and label is None:
        target = "predicted_class_logit"
    grads = switch_model.input_gradients(sample, target, label)
    scores = word_importance(grads, measure)
    return sorted(eligible, key=lambda i: (-scores[i], i))


def candidate_words(
    store: EmbeddingStore,
    index: NeighborIndex,
    pos_lexicon: PosLexicon,
    original_word: str,
    params: SwitchParams,
) -> list[str]:
    """Top candidates_per_word neighbors, optionally tag-matched; never the original."""
    wid = store.word_id(original_word)
    if wid is None:
        return []
    if params.candidates_per_word > index.k:
        raise ValueError(
            f"candidates_per_word {params.candidates_per_word} exceeds index k {index.k}"
        )
    ids = index.row_ids(wid)[: params.candidates_per_word]
    words = [store.words[i] for i in ids]
    if params.pos_match:
        want = pos_lexicon.tag(original_word)
        words = [w for w in words if pos_lexicon.tag(w) == want]
    return words


def generate_alternatives(
    switch_model: ToyClassifier,
    store: EmbeddingStore,
    index: NeighborIndex,
    pos_lexicon: PosLexicon,
    sample: Sample,
    params: SwitchParams,
    stopwords: Optional[frozenset[str]] = None,
    label: Optional[int] = None,
) -> list[Sample]:
    """Word-substituted alternative samples (at most max_samples, deduplicated)."""
    if params.words_to_perturb == 0:
        return []
    ranked = rank_important_words(
        switch_model, sample, params, stopwords=stopwords, label=label
    )
    positions = ranked[: params.words_to_perturb]
    tokens = sample.tokens()
    cands = {
        p: candidate_words(store, index, pos_lexicon, tokens[p].surface, params)
        for p in positions
    }
    positions = [p for p in positions if cands[p]]
    if not positions:
        return []

    original_key = sample.surfaces()
    pool: list[tuple[int, Sample, tuple[str, ...]]] = []
    pool_size = params.max_samples * params.use_pool_multiplier
    for j in range(pool_size):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=params.seed, spawn_key=(j,))
        )
        alt = sample
        for p in positions:
            choices = cands[p]
            word = choices[int(rng.integers(len(choices)))]
            alt = alt.with_token(p, Token(word, store.word_id(word)))
        alt = Sample(alt.text_a, alt.text_b, f"{sample.id}~a{j}")
        pool.append((j, alt, alt.surfaces()))

    if params.use_filter_mode == "off":
        ordered = pool
    else:
        sims = [
            sentence_similarity(store, original_key, key) for _, _, key in pool
        ]
        if params.use_filter_mode == "filter_positive":
            ordered = [entry for entry, s in zip(pool, sims) if s > 0]
        else:  # rank
            order = sorted(range(len(pool)), key=lambda i: (-sims[i], pool[i][0]))
            ordered = [pool[i] for i in order]

    out: list[Sample] = []
    seen: set[tuple[str, ...]] = {original_key}
    for _, alt, key in ordered:
        if key in seen:
            continue
        seen.add(key)
        out.append(alt)
        if len(out) == params.max_samples:
            break
    return out


@dataclass
class SwitchEngine:
    """Bundle of the resources every SWITCH call needs.

    The engine's model may be (and in the desk pipeline is) the same object as
    the defended classifier, but it can also be a separate pre-tuned instance.
    """

    model: ToyClassifier
    store: EmbeddingStore
    index: NeighborIndex
    pos_lexicon: PosLexicon = field(default_factory=PosLexicon.default)
    stopwords: frozenset[str] = field(default_factory=default_stopwords)

    def rank_important_words(
        self, sample: Sample, params: SwitchParams, label: Optional[int] = None
    ) -> list[int]:
        return rank_important_words(
            self.model, sample, params, stopwords=self.stopwords, label=label
        )

    def candidate_words(self, original_word: str, params: SwitchParams) -> list[str]:
        return candidate_words(
            self.store, self.index, self.pos_lexicon, original_word, params
        )

    def generate_alternatives(
        self, sample: Sample, params: SwitchParams, label: Optional[int] = None
    ) -> list[Sample]:
        return generate_alternatives(
            self.model,
            self.store,
            self.index,
            self.pos_lexicon,
            sample,
            params,
            stopwords=self.stopwords,
            label=label,
        )
