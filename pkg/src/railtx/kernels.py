"""Numeric kernels: 8-bit float conversion, token packing, weighted combine.

Each kernel has a vectorized numpy implementation and, when numba is
importable, a compiled variant.  Set RAILTX_PURE_NUMPY=1 to force the numpy
path; `railbench kernels` times both.

The 8-bit float format is e4m3: 1 sign, 4 exponent (bias 7), 3 mantissa
bits, no infinities, 0x7F/0xFF reserved for NaN, largest finite value 448.
Encoding rounds to nearest with ties to even and saturates beyond +-448.
Positive magnitudes sorted ascending coincide with byte values 0x00..0x7E,
which is what the table-driven round below relies on.
"""

from __future__ import annotations

import os

import numpy as np

_PURE = os.environ.get("RAILTX_PURE_NUMPY", "") not in ("", "0")

try:
    if _PURE:
        raise ImportError("pure-numpy mode requested")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return deco

USING_NUMBA = HAS_NUMBA

FP8_MAX = 448.0
FP8_NAN = 0x7F


def _build_tables() -> tuple[np.ndarray, np.ndarray]:
    mags = np.empty(127, dtype=np.float64)
    for code in range(127):
        e = code >> 3
        m = code & 7
        if e == 0:
            mags[code] = m / 8.0 * 2.0 ** -6
        else:
            mags[code] = (1.0 + m / 8.0) * 2.0 ** (e - 7)
    mids = (mags[:-1] + mags[1:]) / 2.0
    return mags, mids


_FP8_MAGS, _FP8_MIDS = _build_tables()

FP8_DECODE = np.zeros(256, dtype=np.float32)
FP8_DECODE[:127] = _FP8_MAGS
FP8_DECODE[127] = np.nan
FP8_DECODE[128:255] = -_FP8_MAGS
FP8_DECODE[255] = np.nan


def fp8_encode_np(x: np.ndarray) -> np.ndarray:
    """Round float values to e4m3 bytes (nearest, ties to even, saturating)."""
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    mag = np.abs(flat)
    idx = np.searchsorted(_FP8_MIDS, mag, side="left")
    tie = (idx < len(_FP8_MIDS))
    tie &= (_FP8_MIDS[np.minimum(idx, len(_FP8_MIDS) - 1)] == mag)
    tie &= (idx % 2 == 1)
    idx = np.minimum(idx + tie, 126).astype(np.uint8)
    out = np.where(np.signbit(flat), idx | 0x80, idx).astype(np.uint8)
    out[np.isnan(flat)] = FP8_NAN
    return out.reshape(np.shape(x))


def fp8_decode_np(b: np.ndarray) -> np.ndarray:
    return FP8_DECODE[np.asarray(b, dtype=np.uint8)]


@njit(cache=True)
def _fp8_encode_nb(flat: np.ndarray, mids: np.ndarray, out: np.ndarray) -> None:
    n = flat.shape[0]
    nm = mids.shape[0]
    for i in range(n):
        x = flat[i]
        if np.isnan(x):
            out[i] = FP8_NAN
            continue
        neg = x < 0.0 or (x == 0.0 and np.signbit(x))
        mag = -x if x < 0.0 else x
        lo, hi = 0, nm
        while lo < hi:
            mid = (lo + hi) // 2
            if mids[mid] < mag:
                lo = mid + 1
            else:
                hi = mid
        idx = lo
        if idx < nm and mids[idx] == mag and idx % 2 == 1:
            idx += 1
        if idx > 126:
            idx = 126
        out[i] = idx | 0x80 if neg else idx


def fp8_encode_nb(x: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty(flat.shape[0], dtype=np.uint8)
    _fp8_encode_nb(flat, _FP8_MIDS, out)
    return out.reshape(np.shape(x))


@njit(cache=True)
def _fp8_decode_nb(b: np.ndarray, table: np.ndarray, out: np.ndarray) -> None:
    for i in range(b.shape[0]):
        out[i] = table[b[i]]


def fp8_decode_nb(b: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(b, dtype=np.uint8).ravel()
    out = np.empty(flat.shape[0], dtype=np.float32)
    _fp8_decode_nb(flat, FP8_DECODE, out)
    return out.reshape(np.shape(b))


def fp8_quantize(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-tensor scaled e4m3 quantization; returns (bytes, scale)."""
    xf = np.asarray(x, dtype=np.float32)
    finite = xf[np.isfinite(xf)]
    amax = float(np.max(np.abs(finite))) if finite.size else 0.0
    scale = amax / FP8_MAX if amax > 0.0 else 1.0
    enc = fp8_encode_nb if USING_NUMBA else fp8_encode_np
    return enc(xf / np.float32(scale)), scale


def fp8_dequantize(b: np.ndarray, scale: float) -> np.ndarray:
    dec = fp8_decode_nb if USING_NUMBA else fp8_decode_np
    return dec(b) * np.float32(scale)


def bf16_encode_np(x: np.ndarray) -> np.ndarray:
    """Truncate float32 to its top 16 bits with round-to-nearest-even."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32)
    nan = (bits & 0x7F800000 == 0x7F800000) & (bits & 0x007FFFFF != 0)
    bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = ((bits + bias) >> np.uint32(16)).astype(np.uint16)
    return np.where(nan, np.uint16(0x7FC0) | (bits >> np.uint32(16)).astype(np.uint16), out)


def bf16_decode_np(h: np.ndarray) -> np.ndarray:
    return (np.asarray(h, dtype=np.uint16).astype(np.uint32) << np.uint32(16)).view(np.float32)


@njit(cache=True)
def _bf16_encode_nb(bits: np.ndarray, out: np.ndarray) -> None:
    for i in range(bits.shape[0]):
        b = bits[i]
        if (b & np.uint32(0x7F800000)) == np.uint32(0x7F800000) \
                and (b & np.uint32(0x007FFFFF)) != 0:
            out[i] = np.uint16(0x7FC0) | np.uint16(b >> np.uint32(16))
        else:
            bias = np.uint32(0x7FFF) + ((b >> np.uint32(16)) & np.uint32(1))
            out[i] = np.uint16((b + bias) >> np.uint32(16))


def bf16_encode_nb(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float32).ravel().view(np.uint32)
    out = np.empty(bits.shape[0], dtype=np.uint16)
    _bf16_encode_nb(bits, out)
    return out.reshape(np.shape(x))


def bf16_encode(x: np.ndarray) -> np.ndarray:
    return bf16_encode_nb(x) if USING_NUMBA else bf16_encode_np(x)


def bf16_decode(h: np.ndarray) -> np.ndarray:
    return bf16_decode_np(h)


def pack_rows_np(src: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Gather src[rows[k]] into a dense [K, width] byte matrix."""
    return np.ascontiguousarray(src[rows])


@njit(cache=True)
def _pack_rows_nb(src: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    for k in range(rows.shape[0]):
        out[k, :] = src[rows[k], :]


def pack_rows_nb(src: np.ndarray, rows: np.ndarray) -> np.ndarray:
    out = np.empty((rows.shape[0], src.shape[1]), dtype=src.dtype)
    _pack_rows_nb(np.ascontiguousarray(src),
                  np.ascontiguousarray(rows, dtype=np.int64), out)
    return out


def pack_rows(src: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return pack_rows_nb(src, rows) if USING_NUMBA else pack_rows_np(src, rows)


def weighted_combine_np(y: np.ndarray, rows: np.ndarray,
                        weights: np.ndarray) -> np.ndarray:
    """out[t] = sum_r weights[t, r] * y[rows[t, r]] in float32."""
    gathered = y[rows].astype(np.float32)
    return np.einsum("trh,tr->th", gathered,
                     weights.astype(np.float32)).astype(np.float32)


@njit(cache=True)
def _weighted_combine_nb(y: np.ndarray, rows: np.ndarray,
                         weights: np.ndarray, out: np.ndarray) -> None:
    t_n, r_n = rows.shape
    h = y.shape[1]
    for t in range(t_n):
        for j in range(h):
            out[t, j] = 0.0
        for r in range(r_n):
            w = weights[t, r]
            src = rows[t, r]
            for j in range(h):
                out[t, j] += w * y[src, j]


def weighted_combine_nb(y: np.ndarray, rows: np.ndarray,
                        weights: np.ndarray) -> np.ndarray:
    out = np.empty((rows.shape[0], y.shape[1]), dtype=np.float32)
    _weighted_combine_nb(np.ascontiguousarray(y, dtype=np.float32),
                         np.ascontiguousarray(rows, dtype=np.int64),
                         np.ascontiguousarray(weights, dtype=np.float32), out)
    return out


def weighted_combine(y: np.ndarray, rows: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
    if USING_NUMBA:
        return weighted_combine_nb(y, rows, weights)
    return weighted_combine_np(y, rows, weights)


def implementations() -> dict[str, dict[str, object]]:
    """Both kernel variants, for the comparison benchmark."""
    out: dict[str, dict[str, object]] = {
        "numpy": {
            "fp8_encode": fp8_encode_np,
            "fp8_decode": fp8_decode_np,
            "bf16_encode": bf16_encode_np,
            "pack_rows": pack_rows_np,
            "weighted_combine": weighted_combine_np,
        }
    }
    if HAS_NUMBA:
        out["numba"] = {
            "fp8_encode": fp8_encode_nb,
            "fp8_decode": fp8_decode_nb,
            "bf16_encode": bf16_encode_nb,
            "pack_rows": pack_rows_nb,
            "weighted_combine": weighted_combine_nb,
        }
    return out
