"""Query-set bit vectors.

Scalar sets (plan nodes, catalogs) are plain ints used as bitmasks, bit i
meaning "serves query i of the batch".  Per-tuple sets in the engine are
numpy (n, n_words) uint64 arrays of 64-bit words, little word first.
"""

from __future__ import annotations

import numpy as np

WORD_BITS = 64


def words_for(n_queries: int) -> int:
    return max(1, (n_queries + WORD_BITS - 1) // WORD_BITS)


def full_mask(n_queries: int) -> int:
    return (1 << n_queries) - 1


def mask_to_words(mask: int, n_words: int) -> np.ndarray:
    out = np.zeros(n_words, dtype=np.uint64)
    for w in range(n_words):
        out[w] = (mask >> (w * WORD_BITS)) & 0xFFFFFFFFFFFFFFFF
    return out


def words_to_mask(words: np.ndarray) -> int:
    mask = 0
    for w, word in enumerate(words.tolist()):
        mask |= int(word) << (w * WORD_BITS)
    return mask


def iter_bits(mask: int):
    """Yield set bit positions, ascending."""
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def to_hex(mask: int, n_words: int) -> str:
    return format(mask, "0%dx" % (n_words * 16))


def nonzero_rows(qs: np.ndarray) -> np.ndarray:
    """Boolean mask of rows with at least one live query bit."""
    if qs.shape[1] == 1:
        return qs[:, 0] != 0
    return qs.any(axis=1)


def bit_rows(qs: np.ndarray, q: int) -> np.ndarray:
    """Boolean mask of rows serving query q."""
    word, bit = divmod(q, WORD_BITS)
    return (qs[:, word] >> np.uint64(bit)) & np.uint64(1) != 0
