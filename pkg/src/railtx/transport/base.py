"""Rail abstraction shared by the simulated fabric and the socket backend.

A Rail is one reliable, UNORDERED delivery path.  It accepts one-sided
writes (optionally carrying a 32-bit immediate) and small two-sided
messages, and reports completions through `poll`.  No ordering is promised
between any two work requests, ever; callers synchronize exclusively through
immediate-value counting above this layer.

Virtual time: every completion carries a `vtime` in microseconds computed
from a deterministic cost model (per-WR fixed cost, per-rail line rate,
per-fragment latency hashed from stable ids).  Virtual time is what the
benchmarks measure; it is independent of the wall-clock interleaving of the
worker threads, so reports are reproducible for a fixed seed.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

from ..wire import NetAddr

MAX_WR_LEN = 1 << 30

_M64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def stable_u01(*keys: int) -> float:
    """Uniform [0,1) drawn from a hash of the keys; order of calls is irrelevant."""
    h = 0x243F6A8885A308D3
    for k in keys:
        h = _mix64(h ^ (k & _M64))
    return (h >> 11) / float(1 << 53)


@dataclass(frozen=True)
class FaultConfig:
    """Behavior knobs of the simulated fabric.

    Latency is uniform in [lat_min_us, lat_max_us] per fragment.  `reorder`
    scrambles the real delivery order per destination: "none" keeps arrival
    order, "random" permutes within a sliding window of `window` packets,
    "reverse" releases each full window last-in first-out.  Delivery stays
    exactly-once under every setting.
    """

    lat_min_us: float = 5.0
    lat_max_us: float = 20.0
    reorder: str = "none"
    window: int = 16
    mtu: int = 4096
    rate_gbps: float = 10.0
    wr_cost_us: float = 1.0
    queue_depth: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reorder not in ("none", "random", "reverse"):
            raise ValueError(f"unknown reorder mode {self.reorder!r}")
        if self.mtu <= 0 or self.window <= 0 or self.queue_depth <= 0:
            raise ValueError("mtu, window and queue_depth must be positive")
        if self.lat_min_us > self.lat_max_us:
            raise ValueError("lat_min_us > lat_max_us")

    def serialize_us(self, nbytes: int) -> float:
        return nbytes * 8.0 / (self.rate_gbps * 1e3)

    def latency_us(self, addr_key: int, wr_key: int, frag: int) -> float:
        u = stable_u01(self.seed, addr_key, wr_key, frag)
        return self.lat_min_us + (self.lat_max_us - self.lat_min_us) * u


def fragment_ranges(length: int, mtu: int) -> list[tuple[int, int]]:
    """Split [0, length) into MTU-sized (offset, size) pieces; one empty piece for len=0."""
    if length == 0:
        return [(0, 0)]
    return [(off, min(mtu, length - off)) for off in range(0, length, mtu)]


@dataclass(frozen=True)
class SendDone:
    """Sender-side completion of one WR (write or message)."""

    wr_key: int
    ok: bool
    vtime: float
    error: str | None = None


@dataclass(frozen=True)
class ImmReceived:
    """Receiver-side notification that an imm-carrying write is fully visible."""

    imm: int
    vtime: float


@dataclass(frozen=True)
class MsgReceived:
    """Receiver-side delivery of a two-sided message into a recv-pool buffer."""

    buf: bytearray
    length: int
    src: NetAddr
    vtime: float

    @property
    def data(self) -> memoryview:
        return memoryview(self.buf)[: self.length]


Completion = SendDone | ImmReceived | MsgReceived


class Rail(abc.ABC):
    """One endpoint of one rail.  post/poll are owner-thread-only."""

    @property
    @abc.abstractmethod
    def addr(self) -> NetAddr: ...

    @abc.abstractmethod
    def register(self, rkey: int, buf: memoryview) -> None: ...

    @abc.abstractmethod
    def deregister(self, rkey: int) -> None: ...

    @abc.abstractmethod
    def post_write(self, dst: NetAddr, rkey: int, dst_offset: int,
                   payload: bytes | memoryview, imm: int | None, wr_key: int,
                   not_before: float, transfer_id: int) -> bool:
        """Post a one-sided write.  Returns False on backpressure (retry later)."""

    @abc.abstractmethod
    def post_msg(self, dst: NetAddr, payload: bytes | memoryview, wr_key: int,
                 not_before: float, transfer_id: int) -> bool: ...

    @abc.abstractmethod
    def post_recv(self, buf: bytearray) -> None: ...

    @abc.abstractmethod
    def poll(self, max_events: int = 64) -> list[Completion]: ...

    @abc.abstractmethod
    def close(self) -> None: ...
