"""64-bit FNV-1a."""

import numba
import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a(buf, h, prime):
    for b in buf:
        h ^= numba.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(buf, FNV_OFFSET, FNV_PRIME))


def fnv1a64_reference(data: bytes) -> int:
    """Pure-Python version, kept for cross-checking."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
