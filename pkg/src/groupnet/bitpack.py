"""Packing of boolean vectors into little-endian 64-bit words.

Bit ``i`` of word ``j`` holds element ``64 * j + i`` of the packed axis.
Bits past the logical length are always written as zero.
"""

import numpy as np

WORD_BITS = 64


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_last_axis(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into ``uint64`` words."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    by = np.packbits(bits, axis=-1, bitorder="little")
    pad = n_words(n) * 8 - by.shape[-1]
    if pad:
        by = np.concatenate([by, np.zeros(by.shape[:-1] + (pad,), np.uint8)], axis=-1)
    by = np.ascontiguousarray(by)
    return by.view("<u8").astype(np.uint64, copy=False)


def unpack_last_axis(words: np.ndarray, n_bits: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    by = words.view(np.uint8)
    return np.unpackbits(by, axis=-1, count=n_bits, bitorder="little").astype(bool)


def tail_masks(n_bits: int) -> np.ndarray:
    """One mask per word with ones exactly on the valid bit positions."""
    nw = n_words(n_bits)
    masks = np.full(nw, np.iinfo(np.uint64).max, dtype=np.uint64)
    rem = n_bits % WORD_BITS
    if nw and rem:
        masks[-1] = np.uint64((1 << rem) - 1)
    return masks
