"""Stable sub-seed derivation so every stage fans out from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(base: int, *key: int) -> int:
    """Deterministic 64-bit sub-seed for (base, key...)."""
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def content_key(*parts: str) -> int:
    """Order-independent-safe integer key for text content (CRC32 of the parts)."""
    return zlib.crc32("\x1f".join(parts).encode("utf-8")) & 0xFFFFFFFF
