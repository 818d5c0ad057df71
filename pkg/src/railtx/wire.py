"""Domain value types and their byte-level encodings.

Everything exchanged between peers (endpoint addresses, region descriptors,
protocol messages) is encoded little-endian with fixed-width integers and
explicit length prefixes.  There is no self-description or version
negotiation; peers are assumed homogeneous.  The exact layouts are documented
in docs/wire.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import WireError

MAX_ADDR_LEN = 64

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F32 = struct.Struct("<f")


@dataclass(frozen=True)
class NetAddr:
    """Opaque identity of one transport endpoint (one rail of one engine).

    Equality is byte equality; the content is interpreted only by the
    transport that minted it.
    """

    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if not 1 <= len(self.data) <= MAX_ADDR_LEN:
            raise WireError(f"NetAddr length {len(self.data)} outside 1..{MAX_ADDR_LEN}")

    @classmethod
    def for_sim(cls, engine_id: int, rail: int) -> "NetAddr":
        return cls(_U32.pack(engine_id) + _U8.pack(rail))

    @classmethod
    def for_udp(cls, host: str, port: int) -> "NetAddr":
        parts = [int(p) for p in host.split(".")]
        if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
            raise WireError(f"not an IPv4 address: {host!r}")
        return cls(bytes(parts) + _U16.pack(port))

    def udp_endpoint(self) -> tuple[str, int]:
        if len(self.data) != 6:
            raise WireError("NetAddr does not carry an (ip, port) endpoint")
        host = ".".join(str(b) for b in self.data[:4])
        (port,) = _U16.unpack(self.data[4:6])
        return host, port

    def __repr__(self) -> str:
        return f"NetAddr({self.data.hex()})"


@dataclass(frozen=True)
class MrDesc:
    """Remote view of a registered memory region.

    Carries the region's virtual base address, its length and one
    (NetAddr, rkey) pair per rail of the owning group.  Serializable and
    exchangeable between peers; `length` is carried so both sides can
    bound-check submissions.
    """

    base: int
    length: int
    rkeys: tuple[tuple[NetAddr, int], ...]

    def __post_init__(self) -> None:
        if not self.rkeys:
            raise WireError("MrDesc requires at least one (NetAddr, rkey) entry")
        addrs = [a for a, _ in self.rkeys]
        if len(set(addrs)) != len(addrs):
            raise WireError("MrDesc rail addresses must be distinct")

    @property
    def nrails(self) -> int:
        return len(self.rkeys)


@dataclass(frozen=True)
class MrHandle:
    """Local view of a registered region, valid only inside the issuing engine."""

    region_id: int
    base: int
    length: int
    device: int | None


@dataclass(frozen=True)
class Pages:
    """Indirect page addressing: page i lives at offset + indices[i] * stride."""

    indices: tuple[int, ...]
    stride: int
    offset: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def page_offset(self, i: int) -> int:
        return self.offset + self.indices[i] * self.stride


@dataclass(frozen=True)
class ScatterDst:
    """One peer's slice in a scatter: src offset -> (desc, offset), `length` bytes."""

    length: int
    src: int
    desc: MrDesc
    offset: int


class Writer:
    """Accumulates little-endian fields into a byte string."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(_U8.pack(v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(_U16.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(_U64.pack(v))
        return self

    def f32(self, v: float) -> "Writer":
        self._parts.append(_F32.pack(v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def take(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Consumes little-endian fields from a byte string, failing loudly."""

    def __init__(self, buf: bytes) -> None:
        self._buf = bytes(buf)
        self._pos = 0

    def _read(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise WireError(f"truncated input: need {n} bytes at offset {self._pos}")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return _U8.unpack(self._read(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._read(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._read(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._read(8))[0]

    def f32(self) -> float:
        return _F32.unpack(self._read(4))[0]

    def raw(self, n: int) -> bytes:
        return self._read(n)

    @property
    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def finish(self) -> None:
        if self._pos != len(self._buf):
            raise WireError(f"{self.remaining} bytes of trailing garbage after decode")


def write_netaddr(w: Writer, addr: NetAddr) -> None:
    w.u16(len(addr.data)).raw(addr.data)


def read_netaddr(r: Reader) -> NetAddr:
    n = r.u16()
    if not 1 <= n <= MAX_ADDR_LEN:
        raise WireError(f"NetAddr length {n} outside 1..{MAX_ADDR_LEN}")
    return NetAddr(r.raw(n))


def encode_netaddr(addr: NetAddr) -> bytes:
    w = Writer()
    write_netaddr(w, addr)
    return w.take()


def decode_netaddr(buf: bytes) -> NetAddr:
    r = Reader(buf)
    addr = read_netaddr(r)
    r.finish()
    return addr


def write_mrdesc(w: Writer, desc: MrDesc) -> None:
    w.u64(desc.base).u64(desc.length).u16(len(desc.rkeys))
    for addr, rkey in desc.rkeys:
        write_netaddr(w, addr)
        w.u64(rkey)


def read_mrdesc(r: Reader) -> MrDesc:
    base = r.u64()
    length = r.u64()
    n = r.u16()
    if n == 0:
        raise WireError("MrDesc with zero rails")
    rkeys = tuple((read_netaddr(r), r.u64()) for _ in range(n))
    return MrDesc(base=base, length=length, rkeys=rkeys)


def encode_mrdesc(desc: MrDesc) -> bytes:
    w = Writer()
    write_mrdesc(w, desc)
    return w.take()


def decode_mrdesc(buf: bytes) -> MrDesc:
    r = Reader(buf)
    desc = read_mrdesc(r)
    r.finish()
    return desc
