"""Small differentiable classifier: logits, exact input gradients, training, checkpoints.

The architecture is a position-wise affine encoder with softplus, mean-pooled
per segment (pair tasks pool premise and hypothesis separately and
concatenate), and an affine head. Everything the hardening mechanisms need is
exposed here: logits, exact gradients with respect to input embedding rows, an
embeddings-in forward entry point, and a batch-extension training hook.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .embedstore import EmbeddingStore
from .textcore import Dataset, LabeledSample, Sample

CHECKPOINT_MAGIC = b"FBTC"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999

# Documented default when fine-tuning a pre-trained checkpoint; the desk
# default below suits from-scratch toy training.
FINE_TUNE_LEARNING_RATE = 2e-5


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate and adam_epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    step: int
    loss: float


BatchExtender = Callable[[list[LabeledSample], int, int], Sequence[LabeledSample]]

GRADIENT_TARGETS = ("loss_vs_label", "predicted_class_logit")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class ToyClassifier:
    """Mean-pool affine classifier over a trainable copy of the embedding table.

    The encoder is position-wise affine with a softplus nonlinearity; softplus
    keeps the gradient's magnitude growing with a position's activation, so
    gradient-norm word importance tracks how much a word drives the
    classification. Embedding row 0 is reserved for out-of-vocabulary tokens
    (and the attacker's mask placeholder); it is zero-initialized and stays
    frozen during training.
    """

    def __init__(
        self,
        words: Sequence[str],
        embeddings: np.ndarray,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: np.ndarray,
        is_pair: bool,
        version: int = CHECKPOINT_VERSION,
    ):
        self.words = tuple(words)
        self.vocab = {w: i for i, w in enumerate(self.words)}
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.is_pair = bool(is_pair)
        self.version = version
        d, h = self.w1.shape
        pooled = 2 * h if self.is_pair else h
        if self.embeddings.shape != (len(self.words) + 1, d):
            raise ValueError("embedding table shape inconsistent with vocab and d")
        if self.b1.shape != (h,) or self.w2.shape[0] != pooled:
            raise ValueError("encoder/head shapes inconsistent")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("head bias shape inconsistent")

    # -- construction ------------------------------------------------------

    @classmethod
    def init(
        cls,
        store: EmbeddingStore,
        num_classes: int,
        hidden_dim: int = 32,
        is_pair: bool = False,
        seed: int = 0,
    ) -> "ToyClassifier":
        """Fresh model: embeddings copied from the store, zeroed head."""
        rng = np.random.default_rng([int(seed), 3])
        d = store.d
        table = np.vstack([np.zeros((1, d)), store.vectors])
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden_dim))
        b1 = np.zeros(hidden_dim)
        pooled = 2 * hidden_dim if is_pair else hidden_dim
        w2 = np.zeros((pooled, num_classes))
        b2 = np.zeros(num_classes)
        return cls(store.words, table, w1, b1, w2, b2, is_pair)

    def copy(self) -> "ToyClassifier":
        return ToyClassifier(
            self.words,
            self.embeddings.copy(),
            self.w1.copy(),
            self.b1.copy(),
            self.w2.copy(),
            self.b2.copy(),
            self.is_pair,
            self.version,
        )

    # -- shape accessors ---------------------------------------------------

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def h(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    # -- forward -----------------------------------------------------------

    def token_rows(self, sample: Sample) -> np.ndarray:
        """Embedding-table row index per position (0 for OOV)."""
        return np.array(
            [self.vocab.get(t.surface, -1) + 1 for t in sample.tokens()],
            dtype=np.int64,
        )

    def embed(self, sample: Sample) -> tuple[np.ndarray, Optional[int]]:
        self._check_task(sample)
        rows = self.embeddings[self.token_rows(sample)]
        return rows, (sample.boundary if self.is_pair else None)

    def _check_task(self, sample: Sample) -> None:
        if sample.is_pair != self.is_pair:
            kind = "pair" if self.is_pair else "single-text"
            raise ValueError(f"sample {sample.id!r} does not match a {kind} model")

    def _pool(self, z: np.ndarray, len_a: Optional[int]) -> np.ndarray:
        if not self.is_pair:
            return z.mean(axis=0)
        assert len_a is not None
        return np.concatenate([z[:len_a].mean(axis=0), z[len_a:].mean(axis=0)])

    def forward_embeddings(
        self, rows: np.ndarray, len_a: Optional[int] = None
    ) -> np.ndarray:
        """Logits straight from embedding rows (the entry point noise defenses use)."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise ValueError(f"expected (n, {self.d}) embedding rows")
        n = rows.shape[0]
        if n == 0:
            raise ValueError("empty input")
        if self.is_pair:
            if len_a is None or not 1 <= len_a < n:
                raise ValueError("pair model needs a segment boundary inside the rows")
        z = softplus(rows @ self.w1 + self.b1)
        return self._pool(z, len_a) @ self.w2 + self.b2

    def forward(self, sample: Sample) -> np.ndarray:
        rows, len_a = self.embed(sample)
        return self.forward_embeddings(rows, len_a)

    def predict(self, sample: Sample) -> int:
        return int(np.argmax(self.forward(sample)))

    def predict_proba(self, sample: Sample) -> np.ndarray:
        return softmax(self.forward(sample))

    # -- gradients ---------------------------------------------------------

    def input_gradients(
        self,
        sample: Sample,
        target: str = "loss_vs_label",
        label: Optional[int] = None,
    ) -> np.ndarray:
        """Exact gradient of the chosen scalar w.r.t. each input embedding row."""
        if target not in GRADIENT_TARGETS:
            raise ValueError(f"unknown gradient target {target!r}")
        if target == "loss_vs_label" and label is None:
            raise ValueError("loss_vs_label target requires a label")
        rows, len_a = self.embed(sample)
        a = rows @ self.w1 + self.b1
        z = softplus(a)
        logits = self._pool(z, len_a) @ self.w2 + self.b2
        if target == "loss_vs_label":
            g_logits = softmax(logits)
            g_logits[label] -= 1.0
        else:
            g_logits = np.zeros(self.num_classes)
            g_logits[int(np.argmax(logits))] = 1.0
        return self._input_grads_from(a, len_a, g_logits)

    def _input_grads_from(
        self, a: np.ndarray, len_a: Optional[int], g_logits: np.ndarray
    ) -> np.ndarray:
        n = a.shape[0]
        dp = self.w2 @ g_logits
        dz = np.empty_like(a)
        if self.is_pair:
            assert len_a is not None
            dz[:len_a] = dp[: self.h] / len_a
            dz[len_a:] = dp[self.h :] / (n - len_a)
        else:
            dz[:] = dp / n
        da = dz * sigmoid(a)
        return da @ self.w1.T


def word_importance(gradients: np.ndarray, measure: str = "l2") -> np.ndarray:
    """Collapse per-position gradient vectors into importance scalars."""
    if measure == "l2":
        return np.linalg.norm(gradients, axis=1)
    if measure == "abs_max":
        return np.abs(gradients).max(axis=1)
    raise ValueError(f"unknown importance measure {measure!r}")


# -- training ---------------------------------------------------------------


def _sample_grads(
    model: ToyClassifier, ls: LabeledSample
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Cross-entropy loss plus parameter gradients for one sample.

    Embedding gradients come back as (row_ids, per-position input grads) to be
    scatter-added by the caller.
    """
    sample = ls.sample
    ids = model.token_rows(sample)
    rows = model.embeddings[ids]
    len_a = sample.boundary if model.is_pair else None
    a = rows @ model.w1 + model.b1
    z = softplus(a)
    p = model._pool(z, len_a)
    logits = p @ model.w2 + model.b2
    if not np.all(np.isfinite(logits)):
        return float("inf"), {}, logits
    probs = softmax(logits)
    pl = probs[ls.label]
    loss = -float(np.log(pl)) if pl > 0 else float("inf")
    g_logits = probs.copy()
    g_logits[ls.label] -= 1.0

    grads: dict[str, np.ndarray] = {}
    grads["w2"] = np.outer(p, g_logits)
    grads["b2"] = g_logits
    dx = model._input_grads_from(a, len_a, g_logits)
    n = a.shape[0]
    dp = model.w2 @ g_logits
    if model.is_pair:
        dz = np.empty_like(a)
        dz[:len_a] = dp[: model.h] / len_a
        dz[len_a:] = dp[model.h :] / (n - len_a)
    else:
        dz = np.broadcast_to(dp / n, a.shape)
    da = dz * sigmoid(a)
    grads["w1"] = rows.T @ da
    grads["b1"] = da.sum(axis=0)
    grads["ids"] = ids
    grads["dx"] = dx
    return loss, grads, logits


def train(
    model: ToyClassifier,
    dataset: Dataset,
    params: TrainParams,
    batch_extender: Optional[BatchExtender] = None,
) -> tuple[ToyClassifier, list[LossRecord]]:
    """Adam training over shuffled batches; returns a new model plus loss history.

    When batch_extender is given it receives (batch, epoch, step) before every
    gradient step and returns the batch to train on; the identity extender is
    bit-for-bit equivalent to no extender.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    m = model.copy()
    names = ("embeddings", "w1", "b1", "w2", "b2")
    state = {k: (np.zeros_like(getattr(m, k)), np.zeros_like(getattr(m, k))) for k in names}
    rng = np.random.default_rng([int(params.seed), 11])
    history: list[LossRecord] = []
    t = 0
    for epoch in range(params.epochs):
        perm = rng.permutation(len(dataset))
        for step, start in enumerate(range(0, len(dataset), params.batch_size)):
            batch = [dataset.samples[j] for j in perm[start : start + params.batch_size]]
            if batch_extender is not None:
                batch = list(batch_extender(batch, epoch, step))
                if not batch:
                    raise ValueError("batch extender returned an empty batch")
                for ls in batch:
                    if ls.label >= dataset.num_classes:
                        raise ValueError(
                            f"extender produced label {ls.label} for "
                            f"{dataset.num_classes}-class training"
                        )
            acc = {k: np.zeros_like(getattr(m, k)) for k in names}
            total = 0.0
            for ls in batch:
                loss, grads, _ = _sample_grads(m, ls)
                total += loss
                if not np.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss for sample {ls.sample.id!r} "
                        f"at epoch {epoch} step {step}"
                    )
                for k in ("w1", "b1", "w2", "b2"):
                    acc[k] += grads[k]
                np.add.at(acc["embeddings"], grads["ids"], grads["dx"])
            scale = 1.0 / len(batch)
            mean_loss = total * scale
            if not np.isfinite(mean_loss):
                raise TrainingDiverged(
                    f"non-finite loss {mean_loss} at epoch {epoch} step {step}"
                )
            acc["embeddings"][0] = 0.0  # reserved OOV/mask row stays zero
            t += 1
            for k in names:
                g = acc[k] * scale
                if params.weight_decay:
                    g = g + params.weight_decay * getattr(m, k)
                mom, vel = state[k]
                mom *= ADAM_BETA1
                mom += (1 - ADAM_BETA1) * g
                vel *= ADAM_BETA2
                vel += (1 - ADAM_BETA2) * g * g
                mhat = mom / (1 - ADAM_BETA1**t)
                vhat = vel / (1 - ADAM_BETA2**t)
                getattr(m, k)[...] -= params.learning_rate * mhat / (
                    np.sqrt(vhat) + params.adam_epsilon
                )
            m.embeddings[0] = 0.0
            history.append(LossRecord(epoch, t, mean_loss))
    return m, history


def save_loss_history(history: Sequence[LossRecord], path: str | Path) -> None:
    lines = ["epoch,step,loss"]
    lines += [f"{r.epoch},{r.step},{r.loss!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def epoch_mean_losses(history: Sequence[LossRecord]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in history:
        by_epoch.setdefault(r.epoch, []).append(r.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: ToyClassifier, path: str | Path) -> None:
    """Little-endian binary checkpoint with a CRC32 trailer."""
    vocab_blob = "\n".join(model.words).encode("utf-8")
    header = struct.pack(
        "<IBIIIIQ",
        CHECKPOINT_VERSION,
        1 if model.is_pair else 0,
        model.d,
        model.h,
        model.num_classes,
        len(model.words),
        len(vocab_blob),
    )
    arrays = b"".join(
        np.ascontiguousarray(getattr(model, k), dtype="<f8").tobytes()
        for k in ("embeddings", "w1", "b1", "w2", "b2")
    )
    payload = header + vocab_blob + arrays
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(CHECKPOINT_MAGIC + payload + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> ToyClassifier:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < 4 + 29 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION}, no migration available)"
        )
    payload, stored = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    _, is_pair, d, h, c, n_words, blob_len = struct.unpack("<IBIIIIQ", payload[:29])
    off = 29
    words = payload[off : off + blob_len].decode("utf-8").split("\n")
    if len(words) != n_words:
        raise CheckpointError(f"{path}: vocab block inconsistent")
    off += blob_len

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape).astype(np.float64)

    pooled = 2 * h if is_pair else h
    emb = take((n_words + 1, d))
    w1 = take((d, h))
    b1 = take((h,))
    w2 = take((pooled, c))
    b2 = take((c,))
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return ToyClassifier(words, emb, w1, b1, w2, b2, bool(is_pair), version)
