"""Tokenization, dataset types, TSV ingestion, and the synthetic desk corpus."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 64

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Token:
    """One lowercase surface form, optionally bound to a vocabulary row."""

    surface: str
    vocab_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.surface:
            raise ValueError("token surface must be non-empty")
        if any(ch.isspace() for ch in self.surface):
            raise ValueError(f"token surface contains whitespace: {self.surface!r}")
        if self.vocab_id is not None and self.vocab_id < 0:
            raise ValueError("vocab_id must be non-negative")


@dataclass(frozen=True)
class Sample:
    """A single text (or premise/hypothesis pair) flowing through the pipelines."""

    text_a: tuple[Token, ...]
    text_b: Optional[tuple[Token, ...]] = None
    id: str = ""

    def __post_init__(self) -> None:
        if not self.text_a:
            raise ValueError(f"sample {self.id!r}: text_a must be non-empty")
        if self.text_b is not None and not self.text_b:
            raise ValueError(f"sample {self.id!r}: text_b present but empty")

    @property
    def is_pair(self) -> bool:
        return self.text_b is not None

    def tokens(self) -> tuple[Token, ...]:
        """All tokens, text_a then text_b; positions index into this tuple."""
        if self.text_b is None:
            return self.text_a
        return self.text_a + self.text_b

    @property
    def boundary(self) -> int:
        """Number of text_a tokens (start of text_b in global positions)."""
        return len(self.text_a)

    def surfaces(self) -> tuple[str, ...]:
        return tuple(t.surface for t in self.tokens())

    def with_token(self, position: int, token: Token) -> "Sample":
        """Copy of this sample with one global position replaced."""
        n = len(self.tokens())
        if not 0 <= position < n:
            raise IndexError(f"position {position} out of range for {n} tokens")
        if position < self.boundary:
            a = self.text_a[:position] + (token,) + self.text_a[position + 1 :]
            return Sample(a, self.text_b, self.id)
        j = position - self.boundary
        assert self.text_b is not None
        b = self.text_b[:j] + (token,) + self.text_b[j + 1 :]
        return Sample(self.text_a, b, self.id)

    def text(self) -> str:
        parts = [" ".join(t.surface for t in self.text_a)]
        if self.text_b is not None:
            parts.append(" ".join(t.surface for t in self.text_b))
        return "\t".join(parts)


@dataclass(frozen=True)
class LabeledSample:
    sample: Sample
    label: int

    def __post_init__(self) -> None:
        if self.label < 0:
            raise ValueError("label must be a non-negative class index")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    num_classes: int
    class_names: tuple[str, ...]
    is_pair: bool

    def __post_init__(self) -> None:
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        for ls in self.samples:
            if ls.label >= self.num_classes:
                raise ValueError(
                    f"sample {ls.sample.id!r}: label {ls.label} >= {self.num_classes}"
                )
            if ls.sample.is_pair != self.is_pair:
                raise ValueError(
                    f"sample {ls.sample.id!r}: pair/single mismatch with dataset"
                )

    def __len__(self) -> int:
        return len(self.samples)


def tokenize(text: str, max_len: int = DEFAULT_MAX_LEN) -> tuple[Token, ...]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens.

    Inputs longer than max_len tokens are truncated with a warning.
    """
    surfaces = _TOKEN_RE.findall(text.lower())
    if max_len is not None and len(surfaces) > max_len:
        logger.warning(
            "truncating input from %d to %d tokens", len(surfaces), max_len
        )
        surfaces = surfaces[:max_len]
    return tuple(Token(s) for s in surfaces)


def make_sample(
    text_a: str,
    text_b: Optional[str] = None,
    id: str = "",
    max_len: int = DEFAULT_MAX_LEN,
) -> Sample:
    b = tokenize(text_b, max_len) if text_b is not None else None
    return Sample(tokenize(text_a, max_len), b, id)


def load_tsv(
    path: str | Path,
    schema: str,
    class_names: Sequence[str],
    max_len: int = DEFAULT_MAX_LEN,
) -> Dataset:
    """Load `label<TAB>text_a[<TAB>text_b]` lines into a Dataset.

    schema is "single" or "pair". Malformed lines raise with the line number.
    """
    if schema not in ("single", "pair"):
        raise ValueError(f"schema must be 'single' or 'pair', got {schema!r}")
    is_pair = schema == "pair"
    want_cols = 3 if is_pair else 2
    label_ids = {name: i for i, name in enumerate(class_names)}
    samples: list[LabeledSample] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != want_cols:
            raise ValueError(
                f"{path}: line {lineno}: expected {want_cols} columns, got {len(cols)}"
            )
        label_name = cols[0]
        if label_name not in label_ids:
            raise ValueError(
                f"{path}: line {lineno}: unknown label {label_name!r} "
                f"(expected one of {list(class_names)})"
            )
        text_b = cols[2] if is_pair else None
        try:
            sample = make_sample(cols[1], text_b, id=f"s{lineno:06d}", max_len=max_len)
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
        samples.append(LabeledSample(sample, label_ids[label_name]))
    return Dataset(tuple(samples), len(class_names), tuple(class_names), is_pair)


def save_tsv(dataset: Dataset, path: str | Path) -> None:
    """Serialize a Dataset back to the TSV wire format (tokens space-joined)."""
    lines = []
    for ls in dataset.samples:
        lines.append(f"{dataset.class_names[ls.label]}\t{ls.sample.text()}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# --------------------------------------------------------------------------
# Synthetic desk corpus
#
# A small closed world of synonym groups. Sentiment sentences draw their
# polarity words from the first member of each group only, leaving the
# remaining members as untrained satellites reachable through the embedding
# neighborhood; nouns/adverbs are drawn from whole groups. Entailment pairs
# are built by copy+synonym (entailment), negation insert (contradiction),
# and topic swap into a reserved noun pool (neutral).
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LexiconGroup:
    """A synonym cluster: members, coarse POS tag, and embedding region."""

    words: tuple[str, ...]
    tag: str
    region: str  # "positive" | "negative" | "bridge" | "generic"


# Sentiment synonym groups: [common, satellite, satellite, edge]. Only the
# common word ever appears in generated text; the satellites orbit it in
# embedding space and the edge member sits out on the boundary shell between
# the polarity regions, where a trained model's judgment is weakest.
_POS_ADJ = [
    ("wonderful", "marvelous", "magnificent", "lovely"),
    ("excellent", "superb", "stellar", "admirable"),
    ("delightful", "charming", "winsome", "amiable"),
    ("brilliant", "dazzling", "luminous", "vivid"),
    ("gripping", "riveting", "engrossing", "intense"),
    ("hilarious", "uproarious", "comical", "droll"),
    ("heartfelt", "sincere", "tender", "earnest"),
    ("masterful", "skillful", "deft", "adept"),
    ("enjoyable", "pleasant", "agreeable", "amusing"),
    ("uplifting", "inspiring", "rousing", "hopeful"),
]

_NEG_ADJ = [
    ("dreadful", "horrendous", "atrocious", "grim"),
    ("awful", "abysmal", "appalling", "dour"),
    ("tedious", "monotonous", "plodding", "dull"),
    ("clumsy", "awkward", "bungled", "uneven"),
    ("bland", "insipid", "flavorless", "plain"),
    ("shallow", "hollow", "vacuous", "thin"),
    ("lifeless", "inert", "listless", "static"),
    ("muddled", "confusing", "garbled", "unclear"),
    ("sloppy", "careless", "slipshod", "untidy"),
    ("dismal", "dreary", "gloomy", "bleak"),
]

_BRIDGE_ADJ = [
    ("fine", "okay", "passable"),
    ("decent", "middling", "serviceable"),
]


_MOVIE_NOUNS = [
    ("movie", "film", "picture"),
    ("story", "plot", "narrative"),
    ("acting", "portrayal", "performances"),
    ("cast", "ensemble", "troupe"),
    ("directing", "direction", "helming"),
    ("score", "music", "soundtrack"),
    ("pacing", "tempo", "rhythm"),
    ("ending", "finale", "conclusion"),
    ("dialogue", "banter", "lines"),
    ("scenery", "visuals", "imagery"),
]

_INTENSIFIERS = [
    ("truly", "genuinely", "sincerely"),
    ("quite", "rather", "fairly"),
    ("utterly", "thoroughly", "wholly"),
    ("notably", "remarkably", "strikingly"),
]

_SUBJECT_NOUNS = [
    ("children", "kids", "youngsters"),
    ("dogs", "hounds", "pups"),
    ("cats", "felines", "kitties"),
    ("teachers", "instructors", "tutors"),
    ("singers", "vocalists", "crooners"),
    ("painters", "sculptors", "artisans"),
    ("farmers", "growers", "planters"),
    ("sailors", "mariners", "seafarers"),
]

_PAIR_VERBS = [
    ("watch", "observe", "view"),
    ("chase", "pursue", "trail"),
    ("help", "assist", "aid"),
    ("teach", "instruct", "coach"),
    ("praise", "applaud", "commend"),
    ("feed", "nourish", "sustain"),
]

# Reserved pool for the neutral topic swap; never used in premises.
_SWAP_NOUNS = [
    ("robots", "androids"),
    ("dragons", "wyverns"),
    ("pirates", "buccaneers"),
    ("wizards", "sorcerers"),
    ("clowns", "jesters"),
    ("ghosts", "phantoms"),
    ("aliens", "martians"),
    ("knights", "paladins"),
]

_FUNCTION_WORDS = (
    "the a an and or of in on at to it its this that is was were with for "
    "as by from not no do does did i we they be been are so such there here "
    "than then too very will would found seemed felt though merely overall "
    "while also still yet about after before during"
).split()


def _groups() -> tuple[LexiconGroup, ...]:
    out: list[LexiconGroup] = []
    for words in _POS_ADJ:
        out.append(LexiconGroup(words, "ADJ", "positive"))
    for words in _NEG_ADJ:
        out.append(LexiconGroup(words, "ADJ", "negative"))
    for words in _BRIDGE_ADJ:
        out.append(LexiconGroup(words, "ADJ", "bridge"))
    for words in _MOVIE_NOUNS:
        out.append(LexiconGroup(words, "NOUN", "generic"))
    for words in _INTENSIFIERS:
        out.append(LexiconGroup(words, "ADV", "generic"))
    for words in _SUBJECT_NOUNS:
        out.append(LexiconGroup(words, "NOUN", "generic"))
    for words in _PAIR_VERBS:
        out.append(LexiconGroup(words, "VERB", "generic"))
    for words in _SWAP_NOUNS:
        out.append(LexiconGroup(words, "NOUN", "generic"))
    for word in _FUNCTION_WORDS:
        out.append(LexiconGroup((word,), "OTHER", "generic"))
    return tuple(out)


LEXICON_GROUPS: tuple[LexiconGroup, ...] = _groups()

POSITIVE_WORDS = frozenset(w for g in _POS_ADJ for w in g)
NEGATIVE_WORDS = frozenset(w for g in _NEG_ADJ for w in g)

WORD_TAGS: dict[str, str] = {w: g.tag for g in LEXICON_GROUPS for w in g.words}

_NOUN_GROUP_OF = {
    w: i for i, words in enumerate(_SUBJECT_NOUNS + _SWAP_NOUNS) for w in words
}
_VERB_GROUP_OF = {w: i for i, words in enumerate(_PAIR_VERBS) for w in words}

SENTIMENT_CLASS_NAMES = ("neg", "pos")
ENTAILMENT_CLASS_NAMES = ("entailment", "neutral", "contradiction")


def lexicon_words() -> tuple[str, ...]:
    """Every synthetic-world word, in stable definition order."""
    seen: dict[str, None] = {}
    for g in LEXICON_GROUPS:
        for w in g.words:
            seen.setdefault(w)
    return tuple(seen)


_SENTIMENT_TEMPLATES = (
    "the {n1} was {a1} {s1} .",
    "the {n1} was {s1} and the {n2} was {s2} .",
    "i found the {n1} {a1} {s1} .",
    "the {n1} seemed {s1} and the {n2} felt {a1} {s2} .",
    "{a1} {s1} {n1} with {s2} {n2} and a {s3} {n3} .",
    "the {n1} was {s1} the {n2} was {s2} and the {n3} was {a1} {s3} .",
    "the {n1} was {s1} though the {n2} was merely {b1} .",
)


def _fill_sentiment(rng: np.random.Generator, label: int) -> str:
    pool = _POS_ADJ if label == 1 else _NEG_ADJ
    template = _SENTIMENT_TEMPLATES[int(rng.integers(len(_SENTIMENT_TEMPLATES)))]
    s_groups = rng.choice(len(pool), size=3, replace=False)
    n_groups = rng.choice(len(_MOVIE_NOUNS), size=3, replace=False)
    slots = {
        # polarity words come from the group's first (common) member only
        "s1": pool[s_groups[0]][0],
        "s2": pool[s_groups[1]][0],
        "s3": pool[s_groups[2]][0],
        "n1": _MOVIE_NOUNS[n_groups[0]][int(rng.integers(3))],
        "n2": _MOVIE_NOUNS[n_groups[1]][int(rng.integers(3))],
        "n3": _MOVIE_NOUNS[n_groups[2]][int(rng.integers(3))],
        "a1": _INTENSIFIERS[int(rng.integers(len(_INTENSIFIERS)))][
            int(rng.integers(3))
        ],
        "b1": _BRIDGE_ADJ[int(rng.integers(len(_BRIDGE_ADJ)))][int(rng.integers(3))],
    }
    return template.format(**slots)


def _fill_entailment(
    rng: np.random.Generator, label: int
) -> tuple[str, str]:
    subj_g = int(rng.integers(len(_SUBJECT_NOUNS)))
    obj_g = int(rng.integers(len(_SUBJECT_NOUNS) - 1))
    if obj_g >= subj_g:
        obj_g += 1
    verb_g = int(rng.integers(len(_PAIR_VERBS)))
    subj = _SUBJECT_NOUNS[subj_g][0]
    obj = _SUBJECT_NOUNS[obj_g][0]
    verb = _PAIR_VERBS[verb_g][0]
    premise = f"the {subj} {verb} the {obj} ."

    def synonym(group: Sequence[str], word: str) -> str:
        # pick a different member of the same group
        others = [w for w in group if w != word]
        return others[int(rng.integers(len(others)))]

    h_subj, h_verb, h_obj = subj, verb, obj
    # at least one synonym swap so the hypothesis never equals the premise
    swap_mask = rng.integers(0, 2, size=3)
    if not swap_mask.any():
        swap_mask[int(rng.integers(3))] = 1
    if swap_mask[0]:
        h_subj = synonym(_SUBJECT_NOUNS[subj_g], subj)
    if swap_mask[1]:
        h_verb = synonym(_PAIR_VERBS[verb_g], verb)
    if swap_mask[2]:
        h_obj = synonym(_SUBJECT_NOUNS[obj_g], obj)

    if label == 0:  # entailment
        hypothesis = f"the {h_subj} {h_verb} the {h_obj} ."
    elif label == 2:  # contradiction
        hypothesis = f"the {h_subj} do not {h_verb} the {h_obj} ."
    else:  # neutral: topic-swap the object into the reserved pool
        pool_g = _SWAP_NOUNS[int(rng.integers(len(_SWAP_NOUNS)))]
        swapped = pool_g[int(rng.integers(len(pool_g)))]
        hypothesis = f"the {h_subj} {h_verb} the {swapped} ."
    return premise, hypothesis


def make_synthetic_dataset(seed: int, size: int, task: str) -> Dataset:
    """Deterministic lexicon-template corpus; labels correct by construction."""
    if size <= 0:
        raise ValueError("size must be positive")
    if task == "sentiment":
        names, is_pair = SENTIMENT_CLASS_NAMES, False
    elif task == "entailment":
        names, is_pair = ENTAILMENT_CLASS_NAMES, True
    else:
        raise ValueError(f"task must be 'sentiment' or 'entailment', got {task!r}")
    rng = np.random.default_rng([int(seed), 0 if task == "sentiment" else 1])
    samples = []
    for i in range(size):
        label = i % len(names)
        if is_pair:
            premise, hypothesis = _fill_entailment(rng, label)
            sample = make_sample(premise, hypothesis, id=f"syn{i:05d}")
        else:
            sample = make_sample(_fill_sentiment(rng, label), id=f"syn{i:05d}")
        samples.append(LabeledSample(sample, label))
    return Dataset(tuple(samples), len(names), names, is_pair)


def synthetic_label_oracle(sample: Sample, task: str) -> int:
    """Re-derive the label from the template rules alone."""
    if task == "sentiment":
        words = set(sample.surfaces())
        has_pos = bool(words & POSITIVE_WORDS)
        has_neg = bool(words & NEGATIVE_WORDS)
        if has_pos == has_neg:
            raise ValueError(
                f"sample {sample.id!r} is not single-polarity; oracle undefined"
            )
        return 1 if has_pos else 0
    if task == "entailment":
        if sample.text_b is None:
            raise ValueError("entailment oracle needs a pair sample")

        def parse(tokens: Iterable[Token]) -> tuple[list[int], list[int], bool]:
            nouns, verbs, negated = [], [], False
            surfaces = [t.surface for t in tokens]
            for i, s in enumerate(surfaces):
                if s == "not" and i > 0 and surfaces[i - 1] == "do":
                    negated = True
                if s in _NOUN_GROUP_OF:
                    nouns.append(_NOUN_GROUP_OF[s])
                if s in _VERB_GROUP_OF:
                    verbs.append(_VERB_GROUP_OF[s])
            return nouns, verbs, negated

        p_nouns, p_verbs, _ = parse(sample.text_a)
        h_nouns, h_verbs, h_neg = parse(sample.text_b)
        if p_nouns != h_nouns or p_verbs != h_verbs:
            return 1  # neutral
        return 2 if h_neg else 0
    raise ValueError(f"unknown task {task!r}")
