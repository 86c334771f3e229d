"""Word-embedding store, exact cosine kNN, and the precomputed neighbor matrix."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import textcore
from .textcore import Token

logger = logging.getLogger(__name__)

DEFAULT_K = 100

INDEX_MAGIC = b"FBNI"
INDEX_VERSION = 1
_SENTINEL = -1  # pads rows with fewer than k real neighbors
_SENTINEL_U32 = 0xFFFFFFFF


class EmbeddingStore:
    """Vocabulary plus one dense vector per word (immutable after construction)."""

    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if len(words) != vectors.shape[0]:
            raise ValueError("one vector row per word required")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        norms = np.linalg.norm(vectors, axis=1)
        if not np.any(norms > 0):
            raise ValueError("at least one vector must have nonzero norm")
        self.words: tuple[str, ...] = tuple(words)
        self.vocab: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self.norms = norms
        self.zero_norm_ids: tuple[int, ...] = tuple(np.nonzero(norms == 0)[0].tolist())
        self._unit: Optional[np.ndarray] = None

    def unit_rows(self) -> np.ndarray:
        """Row-normalized vectors (zero rows stay zero); cached."""
        if self._unit is None:
            normed = np.zeros_like(self.vectors)
            nz = self.norms > 0
            normed[nz] = self.vectors[nz] / self.norms[nz, None]
            normed.setflags(write=False)
            self._unit = normed
        return self._unit

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def word_id(self, word: str) -> Optional[int]:
        return self.vocab.get(word)

    def __contains__(self, word: str) -> bool:
        return word in self.vocab


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Parse GloVe-style `word v1 v2 ... vd` lines into a store."""
    words: list[str] = []
    seen_words: set[str] = set()
    rows: list[np.ndarray] = []
    d: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if not values:
                raise ValueError(f"{path}: line {lineno}: no vector components")
            try:
                row = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            if d is None:
                d = len(row)
            elif len(row) != d:
                raise ValueError(
                    f"{path}: line {lineno}: dimension {len(row)} != {d}"
                )
            if word in seen_words:
                raise ValueError(f"{path}: line {lineno}: duplicate word {word!r}")
            seen_words.add(word)
            words.append(word)
            rows.append(row)
    if not words:
        raise ValueError(f"{path}: empty embedding file")
    store = EmbeddingStore(words, np.vstack(rows))
    if store.zero_norm_ids:
        flagged = [store.words[i] for i in store.zero_norm_ids]
        logger.warning(
            "loaded %d words (d=%d); %d zero vectors admitted: %s",
            len(store), store.d, len(flagged), ", ".join(flagged),
        )
    else:
        logger.info("loaded %d words (d=%d)", len(store), store.d)
    return store


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, row in zip(store.words, store.vectors):
            fh.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


@dataclass(frozen=True)
class NeighborIndex:
    """Row i holds the ids of the k nearest words to word i, best first."""

    k: int
    neighbors: np.ndarray  # (vocab, k) int64, -1-padded

    def row_ids(self, word_id: int) -> np.ndarray:
        row = self.neighbors[word_id]
        return row[row != _SENTINEL]

    def validate_against(self, store: EmbeddingStore) -> None:
        """Assert the stored rows match the store's cosine geometry."""
        normed = store.unit_rows()
        for i in range(len(store)):
            row = self.row_ids(i)
            if i in row:
                raise AssertionError(f"row {i} contains its own word id")
            sims = normed[row] @ normed[i]
            if np.any(np.diff(sims) > 0):
                raise AssertionError(f"row {i} similarities are not non-increasing")


def build_neighbor_index(
    store: EmbeddingStore, k: int = DEFAULT_K, chunk: int = 512
) -> NeighborIndex:
    """Exact cosine kNN over the whole vocabulary.

    Ties break by ascending word id. Zero-norm words are excluded as
    candidates and get an empty row as queries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(store)
    normed = store.unit_rows()
    zero = store.norms == 0
    width = min(k, n - 1)
    out = np.full((n, width), _SENTINEL, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sims = normed[start:stop] @ normed.T
        sims[:, zero] = -np.inf
        for i in range(start, stop):
            if zero[i]:
                continue
            row = sims[i - start].copy()
            row[i] = -np.inf
            valid = np.nonzero(row > -np.inf)[0]
            # sort by descending similarity, then ascending id
            order = valid[np.lexsort((valid, -row[valid]))][:width]
            out[i, : len(order)] = order
    out.setflags(write=False)
    return NeighborIndex(k=width, neighbors=out)


def neighbors(
    store: EmbeddingStore, index: NeighborIndex, word_id: int, top: int
) -> list[tuple[int, float]]:
    """First `top` precomputed neighbors with similarities recomputed on demand."""
    if not 0 <= word_id < len(store):
        raise KeyError(f"unknown word id {word_id}")
    if top < 0 or top > index.k:
        raise ValueError(f"top must be in [0, {index.k}], got {top}")
    ids = index.row_ids(word_id)[:top]
    if len(ids) == 0:
        return []
    normed = store.unit_rows()
    sims = normed[ids] @ normed[word_id]
    return [(int(i), float(s)) for i, s in zip(ids, sims)]


def save_index(index: NeighborIndex, path: str | Path) -> None:
    n = index.neighbors.shape[0]
    ids = index.neighbors.astype(np.int64).copy()
    ids[ids == _SENTINEL] = _SENTINEL_U32
    payload = struct.pack("<III", INDEX_VERSION, n, index.k)
    payload += ids.astype("<u4").tobytes()
    Path(path).write_bytes(INDEX_MAGIC + payload)


def load_index(path: str | Path) -> NeighborIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: not a neighbor index file (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated index header")
    version, n, k = struct.unpack("<III", raw[4:16])
    if version != INDEX_VERSION:
        raise ValueError(
            f"{path}: index version {version} unsupported (expected {INDEX_VERSION})"
        )
    body = raw[16:]
    if len(body) != n * k * 4:
        raise ValueError(f"{path}: expected {n * k * 4} id bytes, got {len(body)}")
    ids = np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(n, k)
    ids[ids == _SENTINEL_U32] = _SENTINEL
    ids.setflags(write=False)
    return NeighborIndex(k=k, neighbors=ids)


TokenLike = Union[Token, str]


def _surface(tok: TokenLike) -> str:
    return tok.surface if isinstance(tok, Token) else tok


def sentence_vector(store: EmbeddingStore, tokens: Iterable[TokenLike]) -> np.ndarray:
    """Mean of in-vocabulary token vectors; zero vector if none qualify."""
    ids = [store.vocab[s] for s in map(_surface, tokens) if s in store.vocab]
    if not ids:
        return np.zeros(store.d)
    return store.vectors[ids].mean(axis=0)


def sentence_similarity(
    store: EmbeddingStore,
    tokens_a: Iterable[TokenLike],
    tokens_b: Iterable[TokenLike],
) -> float:
    """Cosine of the two sentence vectors; 0.0 if either vector is zero."""
    va = sentence_vector(store, tokens_a)
    vb = sentence_vector(store, tokens_b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------------------
# Fixture store for the synthetic desk corpus.
#
# Sentiment groups cluster inside two opposing regions of the sphere (offset
# +/- along one polarity axis), bridge adjectives sit between the regions, and
# everything else lands in generic positions. Within a sentiment group the
# common word sits near the cluster center with the satellites orbiting it,
# so a word's top neighbors are its own synonyms; the group's last (edge)
# member is projected onto the boundary shell where the axis component is
# zero, still closest to its host cluster but outside either polarity region.
# --------------------------------------------------------------------------


def make_fixture_store(
    seed: int = 0,
    d: int = 16,
    satellite_spread: float = 0.7,
    generic_spread: float = 0.35,
) -> EmbeddingStore:
    rng = np.random.default_rng([int(seed), 7])
    axis = rng.normal(size=d)
    axis /= np.linalg.norm(axis)

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    def off_axis() -> np.ndarray:
        g = rng.normal(size=d)
        g -= (g @ axis) * axis
        return unit(g)

    words: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for group in textcore.LEXICON_GROUPS:
        polar = group.region in ("positive", "negative")
        if polar:
            sign = 1.0 if group.region == "positive" else -1.0
            center = unit(sign * 0.75 * axis + 0.66 * off_axis())
            spread = satellite_spread
        elif group.region == "bridge":
            center = off_axis()
            spread = satellite_spread
        else:
            center = unit(rng.normal(size=d))
            spread = generic_spread
        last = len(group.words) - 1
        for j, word in enumerate(group.words):
            if word in seen:
                continue
            seen.add(word)
            if polar and j == last and last >= 3:
                edge = center - (center @ axis) * axis
                row = unit(edge + 0.2 * unit(rng.normal(size=d)))
            else:
                scale = 0.15 if j == 0 else spread
                row = unit(center + scale * unit(rng.normal(size=d)))
            words.append(word)
            rows.append(row)
    return EmbeddingStore(words, np.vstack(rows))
