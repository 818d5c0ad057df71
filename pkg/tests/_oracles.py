"""Independent reference implementations the tests compare against.

Everything here is derived from the documented formats and protocol
contracts, not from the package internals: scalar float conversions from
the e4m3/bf16 bit definitions, MoE dispatch/combine from a literal
all-to-all, and schedule coverage from direct enumeration of who needs
which shard.
"""

from __future__ import annotations

import bisect
import math
import struct
from typing import Callable, Sequence

import numpy as np

# ------------------------------------------------------------ e4m3 scalars

# 1 sign, 4 exponent (bias 7), 3 mantissa bits; no infinities; 0x7F/0xFF
# are NaN; largest finite magnitude 448. Codes 0x00..0x7E sorted by value.
_E4M3_MAGS = []
for _code in range(127):
    _e, _m = _code >> 3, _code & 7
    if _e == 0:
        _E4M3_MAGS.append(_m / 8.0 * 2.0 ** -6)
    else:
        _E4M3_MAGS.append((1.0 + _m / 8.0) * 2.0 ** (_e - 7))

FP8_MAX = 448.0


def fp8_encode_scalar(x: float) -> int:
    """Round one float to its e4m3 byte: nearest, ties to the even code,
    saturating at the largest finite magnitude."""
    x = float(x)
    if math.isnan(x):
        return 0x7F
    sign = 0x80 if math.copysign(1.0, x) < 0.0 else 0
    mag = abs(x)
    i = bisect.bisect_left(_E4M3_MAGS, mag)
    if i == 0:
        code = 0
    elif i >= len(_E4M3_MAGS):
        code = 126
    else:
        below = mag - _E4M3_MAGS[i - 1]
        above = _E4M3_MAGS[i] - mag
        if below < above:
            code = i - 1
        elif below > above:
            code = i
        else:
            code = i - 1 if (i - 1) % 2 == 0 else i
    return code | sign


def fp8_decode_scalar(code: int) -> float:
    code = int(code) & 0xFF
    if code in (0x7F, 0xFF):
        return float("nan")
    mag = _E4M3_MAGS[code & 0x7F]
    return -mag if code & 0x80 else mag


def bf16_encode_scalar(x: float) -> int:
    """Top 16 bits of the float32 pattern, round to nearest even; NaN
    stays NaN with the quiet bit forced."""
    (bits,) = struct.unpack("<I", struct.pack("<f", x))
    if bits & 0x7F800000 == 0x7F800000 and bits & 0x007FFFFF:
        return 0x7FC0 | (bits >> 16)
    return ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16) & 0xFFFF


def bf16_decode_scalar(h: int) -> float:
    (v,) = struct.unpack("<f", struct.pack("<I", (int(h) & 0xFFFF) << 16))
    return v


# ----------------------------------------------------------- MoE reference


def moe_dispatch_oracle(ranks: int, experts: int,
                        routes: Sequence[np.ndarray],
                        payloads: Sequence[np.ndarray],
                        ) -> dict[tuple[int, int], list[bytes]]:
    """Literal all-to-all: the multiset of payload rows each (destination
    rank, local expert) must receive, as byte strings."""
    local = experts // ranks
    out: dict[tuple[int, int], list[bytes]] = {
        (d, le): [] for d in range(ranks) for le in range(local)}
    for src in range(ranks):
        for t in range(len(routes[src])):
            for e in routes[src][t]:
                e = int(e)
                out[(e // local, e % local)].append(
                    payloads[src][t].tobytes())
    return out


def moe_combine_oracle(routes: Sequence[np.ndarray],
                       weights: Sequence[np.ndarray],
                       values: Sequence[np.ndarray],
                       expert_fn: Callable[[int, np.ndarray], np.ndarray],
                       ) -> list[np.ndarray]:
    """fp32 accumulator: out[src][t] = sum_k w[t,k] * f(e_k, x_t)."""
    combined = []
    for src in range(len(routes)):
        rows = []
        for t in range(len(routes[src])):
            acc = np.zeros(values[src].shape[1], dtype=np.float32)
            for k, e in enumerate(routes[src][t]):
                y = expert_fn(int(e), values[src][t]).astype(np.float32)
                acc += np.float32(weights[src][t, k]) * y
            rows.append(acc)
        combined.append(np.stack(rows) if rows else
                        np.zeros((0, values[src].shape[1]), np.float32))
    return combined


# ------------------------------------------------------- schedule coverage


def coverage_oracle(infer: dict[int, Sequence],
                    ) -> dict[tuple, set[int]]:
    """Every prepared slice each inference rank must receive, enumerated
    straight from the destination metadata."""
    wanted: dict[tuple, set[int]] = {}
    for rank, metas in infer.items():
        for m in metas:
            key = (m.name, m.axis, m.shard_index, m.shard_count)
            wanted.setdefault(key, set()).add(rank)
    return wanted
