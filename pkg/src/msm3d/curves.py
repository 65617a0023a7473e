"""Morton and Hilbert codes for integer 3-D coordinates (vectorized)."""

from __future__ import annotations

import numpy as np

from .errors import RangeError

CURVES = ("Z", "TZ", "H", "TH")
DEFAULT_BITS = 16


def _check(coords: np.ndarray, bits: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {c.shape}")
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise RangeError(f"coordinates exceed the {bits}-bit per-axis budget")
    return c


def morton_encode(coords, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Interleave bits with axis 0 in the lowest position of every triple."""
    c = _check(coords, bits)
    code = np.zeros(c.shape[0], dtype=np.int64)
    for b in range(bits):
        for axis in range(3):
            code |= ((c[:, axis] >> b) & 1) << (3 * b + axis)
    return code


# 3-bit lookup tables for Hamilton's entry-point / direction formulation
_GRAY = np.array([i ^ (i >> 1) for i in range(8)], dtype=np.int64)
_GRAY_INV = np.argsort(_GRAY).astype(np.int64)


def _trailing_ones(i: int) -> int:
    c = 0
    while i & 1:
        c += 1
        i >>= 1
    return c


_ENTRY = np.array([0] + [int(_GRAY[2 * ((w - 1) // 2)]) for w in range(1, 8)], dtype=np.int64)
_DIRECTION = np.array([0] + [(_trailing_ones(w - 1) if w % 2 == 0 else _trailing_ones(w)) % 3
                             for w in range(1, 8)], dtype=np.int64)


def _rotl3(x, r):
    r = r % 3
    return ((x << r) | (x >> ((3 - r) % 3))) & 7


def _rotr3(x, r):
    r = r % 3
    return ((x >> r) | (x << ((3 - r) % 3))) & 7


def hilbert_encode(coords, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Hilbert index after Hamilton's entry/direction recursion.

    Each 3-bit digit is the Gray-code rank of the current cell in the
    transformed frame; bit ``j`` of a cell label belongs to axis ``j``.
    """
    c = _check(coords, bits)
    n = c.shape[0]
    e = np.zeros(n, dtype=np.int64)
    d = np.zeros(n, dtype=np.int64)
    code = np.zeros(n, dtype=np.int64)
    for b in range(bits - 1, -1, -1):
        label = ((c[:, 0] >> b) & 1) | (((c[:, 1] >> b) & 1) << 1) | (((c[:, 2] >> b) & 1) << 2)
        w = _GRAY_INV[_rotr3(label ^ e, d + 1)]
        e = e ^ _rotl3(_ENTRY[w], d + 1)
        d = (d + _DIRECTION[w] + 1) % 3
        code = (code << 3) | w
    return code


def curve_code(coords, curve: str, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Code for one of the four serialization curves.

    ``TZ``/``TH`` apply the same codec to the rotated axis triple (y, z, x).
    """
    c = np.asarray(coords, dtype=np.int64)
    if curve in ("TZ", "TH"):
        c = c[:, [1, 2, 0]]
    if curve in ("Z", "TZ"):
        return morton_encode(c, bits)
    if curve in ("H", "TH"):
        return hilbert_encode(c, bits)
    raise ValueError(f"unknown curve {curve!r}; expected one of {CURVES}")
