"""UDP datagram backend: reliability via acks and retransmission.

Each rail owns one UDP socket.  Fragments travel as datagrams numbered with
a per-destination packet sequence; the receiver replies with a cumulative
ack plus a bounded selective list, and the sender retransmits anything
unacked after `rto`.  Duplicates (from retransmits racing acks) are dropped
by sequence bookkeeping, so delivery stays exactly-once per fragment; WR
semantics (imm after full payload, error on unknown rkey) match the
simulated fabric.  Packet layout is documented bit-exactly in docs/wire.md.

Virtual timestamps on this backend are wall-clock microseconds since the
fabric started; reports measured over sockets are not deterministic.
"""

from __future__ import annotations

import collections
import logging
import socket
import struct
import threading
import time

from ..errors import RegionError, TransferError, WireError
from ..trace import TraceRecorder
from ..wire import NetAddr, Reader, Writer
from .base import (Completion, FaultConfig, ImmReceived, MsgReceived, Rail,
                   SendDone, fragment_ranges, MAX_WR_LEN)

logger = logging.getLogger(__name__)

MAGIC = 0x31585452
K_DATA = 1
K_MSG = 2
K_ACK = 3
K_NACK = 4
K_DONE = 5

DEFAULT_PAYLOAD = 60 * 1024
DEFAULT_RTO_S = 0.010
MAX_RETRIES = 500
SEND_WINDOW = 256
_ACK_SELECTIVE_MAX = 64
_DONE_TTL_S = 60.0

_HDR = struct.Struct("<IB")


def encode_packet(kind: int, sender: NetAddr, wr_seq: int, transfer_id: int,
                  rkey: int, dst_offset: int, frag_index: int, frag_count: int,
                  imm: int | None, pkt_seq: int, payload: bytes) -> bytes:
    w = Writer()
    w.u32(MAGIC).u8(kind)
    w.u16(len(sender.data)).raw(sender.data)
    w.u64(wr_seq).u64(transfer_id).u64(rkey).u64(dst_offset)
    w.u32(frag_index).u32(frag_count)
    w.u8(1 if imm is not None else 0).u32(imm if imm is not None else 0)
    w.u64(pkt_seq)
    w.raw(payload)
    return w.take()


class Packet:
    __slots__ = ("kind", "sender", "wr_seq", "transfer_id", "rkey",
                 "dst_offset", "frag_index", "frag_count", "imm", "pkt_seq",
                 "payload")

    def __init__(self, kind: int, sender: NetAddr, wr_seq: int,
                 transfer_id: int, rkey: int, dst_offset: int,
                 frag_index: int, frag_count: int, imm: int | None,
                 pkt_seq: int, payload: bytes) -> None:
        self.kind = kind
        self.sender = sender
        self.wr_seq = wr_seq
        self.transfer_id = transfer_id
        self.rkey = rkey
        self.dst_offset = dst_offset
        self.frag_index = frag_index
        self.frag_count = frag_count
        self.imm = imm
        self.pkt_seq = pkt_seq
        self.payload = payload


def decode_packet(buf: bytes) -> Packet:
    r = Reader(buf)
    magic = r.u32()
    if magic != MAGIC:
        raise WireError(f"bad magic {magic:#x}")
    kind = r.u8()
    alen = r.u16()
    sender = NetAddr(r.raw(alen))
    wr_seq = r.u64()
    transfer_id = r.u64()
    rkey = r.u64()
    dst_offset = r.u64()
    frag_index = r.u32()
    frag_count = r.u32()
    imm_present = r.u8()
    imm_value = r.u32()
    pkt_seq = r.u64()
    payload = r.raw(r.remaining)
    return Packet(kind, sender, wr_seq, transfer_id, rkey, dst_offset,
                  frag_index, frag_count,
                  imm_value if imm_present else None, pkt_seq, payload)


class _PeerTx:
    """Sender-side per-destination reliability state.

    `inflight` holds unacked datagrams: seq -> [frame, wr_key, sent_at,
    retries]; insertion order is seq order.  Status datagrams (DONE/NACK
    going back to a writer) use wr_key -1: they are retransmitted like any
    other frame but carry no local WR bookkeeping.
    """

    __slots__ = ("next_seq", "inflight", "unsent")

    def __init__(self) -> None:
        self.next_seq = 1
        self.inflight: collections.OrderedDict[int, list] = collections.OrderedDict()
        self.unsent: collections.deque[tuple[bytes, int, int]] = collections.deque()


class _PeerRx:
    """Receiver-side per-sender dedupe state."""

    __slots__ = ("cum", "oo")

    def __init__(self) -> None:
        self.cum = 0
        self.oo: set[int] = set()

    def accept(self, seq: int) -> bool:
        if seq <= self.cum or seq in self.oo:
            return False
        self.oo.add(seq)
        while self.cum + 1 in self.oo:
            self.cum += 1
            self.oo.discard(self.cum)
        return True


class _RecvWr:
    __slots__ = ("frags", "error", "done_at")

    def __init__(self) -> None:
        self.frags: dict[int, Packet] = {}
        self.error: str | None = None
        self.done_at: float | None = None


class UdpRail(Rail):
    def __init__(self, fabric: "UdpFabric", host: str, port: int,
                 trace: TraceRecorder | None) -> None:
        self._fabric = fabric
        self._cfg = fabric.config
        self._mtu = min(self._cfg.mtu, DEFAULT_PAYLOAD)
        self._rto = fabric.rto
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 22)
        self._sock.bind((host, port))
        self._addr = NetAddr.for_udp(*self._sock.getsockname())
        self._trace = trace if trace is not None else TraceRecorder(repr(self._addr))
        self._t0 = fabric.t0

        self._lock = threading.Lock()
        self._regions: dict[int, memoryview] = {}
        self._recv_pool: list[bytearray] = []
        self._tx: dict[NetAddr, _PeerTx] = {}
        self._rx: dict[bytes, _PeerRx] = {}
        self._wr_rx: dict[tuple[bytes, int], _RecvWr] = {}
        # write keys awaiting a WR_DONE / NACK status from the receiver
        self._wr_tx: set[int] = set()

        self._cq_lock = threading.Lock()
        self._cq: list[Completion] = []
        self.on_event = None

        self._closed = threading.Event()
        self._io = threading.Thread(target=self._io_loop,
                                    name=f"udp-{port}", daemon=True)
        self._io.start()

    @property
    def addr(self) -> NetAddr:
        return self._addr

    def _now(self) -> float:
        return (time.monotonic() - self._t0) * 1e6

    def register(self, rkey: int, buf: memoryview) -> None:
        if buf.readonly:
            raise RegionError("registered region must be writable")
        with self._lock:
            if rkey in self._regions:
                raise RegionError(f"rkey {rkey} already registered")
            self._regions[rkey] = buf

    def deregister(self, rkey: int) -> None:
        with self._lock:
            if self._regions.pop(rkey, None) is None:
                raise RegionError(f"rkey {rkey} not registered")

    def post_recv(self, buf: bytearray) -> None:
        with self._lock:
            self._recv_pool.append(buf)

    def _post(self, kind: int, dst: NetAddr, rkey: int, dst_offset: int,
              payload: bytes | memoryview, imm: int | None, wr_key: int,
              transfer_id: int) -> bool:
        if self._closed.is_set():
            raise TransferError("rail is closed")
        if len(payload) > MAX_WR_LEN:
            raise TransferError(f"WR length {len(payload)} exceeds {MAX_WR_LEN}")
        if kind == K_DATA and len(payload) == 0 and imm is None:
            raise TransferError("zero-length write requires an immediate")
        endpoint = dst.udp_endpoint()
        frags = fragment_ranges(len(payload), self._mtu)
        n = len(frags)
        with self._lock:
            tx = self._tx.get(dst)
            if tx is None:
                tx = self._tx[dst] = _PeerTx()
            self._wr_tx.add(wr_key)
            now = time.monotonic()
            to_send = []
            for i, (off, sz) in enumerate(frags):
                seq = tx.next_seq
                tx.next_seq += 1
                frame = encode_packet(kind, self._addr, wr_key, transfer_id,
                                      rkey, dst_offset + off, i, n, imm, seq,
                                      bytes(payload[off:off + sz]))
                if len(tx.inflight) < SEND_WINDOW:
                    tx.inflight[seq] = [frame, wr_key, now, 0]
                    to_send.append(frame)
                else:
                    tx.unsent.append((frame, seq, wr_key))
        self._trace.record("wr_post", vtime=self._now(), wr=wr_key,
                           transfer=transfer_id, nbytes=len(payload), imm=imm,
                           dst=dst.data.hex(),
                           kind="write" if kind == K_DATA else "msg")
        for frame in to_send:
            self._sock.sendto(frame, endpoint)
        return True

    def post_write(self, dst: NetAddr, rkey: int, dst_offset: int,
                   payload: bytes | memoryview, imm: int | None, wr_key: int,
                   not_before: float, transfer_id: int) -> bool:
        return self._post(K_DATA, dst, rkey, dst_offset, payload, imm,
                          wr_key, transfer_id)

    def post_msg(self, dst: NetAddr, payload: bytes | memoryview, wr_key: int,
                 not_before: float, transfer_id: int) -> bool:
        return self._post(K_MSG, dst, 0, 0, payload, None, wr_key, transfer_id)

    def poll(self, max_events: int = 64) -> list[Completion]:
        with self._cq_lock:
            out = self._cq[:max_events]
            del self._cq[:max_events]
        return out

    def close(self) -> None:
        self._closed.set()
        self._io.join(timeout=2.0)
        self._sock.close()

    def _cq_push(self, ev: Completion) -> None:
        with self._cq_lock:
            self._cq.append(ev)
        cb = self.on_event
        if cb is not None:
            cb()

    # ------------------------------------------------------------- io thread

    def _io_loop(self) -> None:
        self._sock.settimeout(0.002)
        last_scan = time.monotonic()
        while not self._closed.is_set():
            try:
                data, peer = self._sock.recvfrom(65536)
            except socket.timeout:
                data, peer = None, None
            except OSError:
                break
            if data is not None:
                try:
                    pkt = decode_packet(data)
                except WireError as exc:
                    logger.warning("dropping malformed datagram: %s", exc)
                    pkt = None
                if pkt is not None:
                    self._dispatch(pkt, peer)
            now = time.monotonic()
            if now - last_scan >= self._rto / 2:
                last_scan = now
                self._retransmit(now)

    def _dispatch(self, pkt: Packet, peer: tuple[str, int]) -> None:
        if pkt.kind == K_ACK:
            self._handle_ack(pkt)
        elif pkt.kind in (K_NACK, K_DONE):
            self._handle_status(pkt, peer)
        else:
            self._handle_data(pkt, peer)

    # sender side

    def _retransmit(self, now: float) -> None:
        expired: list[tuple[bytes, tuple[str, int]]] = []
        dead: set[int] = set()
        with self._lock:
            for dst, tx in self._tx.items():
                endpoint = None
                drop: list[int] = []
                for seq, rec in tx.inflight.items():
                    if now - rec[2] < self._rto:
                        continue
                    rec[3] += 1
                    if rec[3] > MAX_RETRIES:
                        drop.append(seq)
                        if rec[1] >= 0:
                            dead.add(rec[1])
                        continue
                    rec[2] = now
                    if endpoint is None:
                        endpoint = dst.udp_endpoint()
                    expired.append((rec[0], endpoint))
                for seq in drop:
                    tx.inflight.pop(seq, None)
            fails = [self._finish_wr_locked(wk, False, "peer unreachable")
                     for wk in dead]
        for frame, endpoint in expired:
            try:
                self._sock.sendto(frame, endpoint)
            except OSError:
                pass
        for ev in fails:
            if ev is not None:
                self._cq_push(ev)

    def _finish_wr_locked(self, wr_key: int, ok: bool,
                          reason: str | None) -> SendDone | None:
        if wr_key not in self._wr_tx:
            return None
        self._wr_tx.discard(wr_key)
        for tx in self._tx.values():
            stale = [s for s, rec in tx.inflight.items() if rec[1] == wr_key]
            for s in stale:
                del tx.inflight[s]
            if tx.unsent:
                tx.unsent = collections.deque(
                    (f, s, wk) for f, s, wk in tx.unsent if wk != wr_key)
        return SendDone(wr_key, ok, self._now(), reason)

    def _handle_ack(self, pkt: Packet) -> None:
        try:
            r = Reader(pkt.payload)
            cum = r.u64()
            sel = [r.u64() for _ in range(r.u16())]
            r.finish()
        except WireError:
            return
        to_send: list[tuple[bytes, tuple[str, int]]] = []
        with self._lock:
            tx = self._tx.get(pkt.sender)
            if tx is None:
                return
            while tx.inflight:
                seq = next(iter(tx.inflight))
                if seq > cum:
                    break
                tx.inflight.pop(seq)
            for seq in sel:
                tx.inflight.pop(seq, None)
            now = time.monotonic()
            endpoint = pkt.sender.udp_endpoint()
            while tx.unsent and len(tx.inflight) < SEND_WINDOW:
                frame, seq, wk = tx.unsent.popleft()
                tx.inflight[seq] = [frame, wk, now, 0]
                to_send.append((frame, endpoint))
        for frame, endpoint in to_send:
            try:
                self._sock.sendto(frame, endpoint)
            except OSError:
                pass

    def _handle_status(self, pkt: Packet, peer: tuple[str, int]) -> None:
        """WR_DONE / NACK travel reliably: dedupe, ack, then complete the WR."""
        with self._lock:
            rx = self._rx.get(pkt.sender.data)
            if rx is None:
                rx = self._rx[pkt.sender.data] = _PeerRx()
            fresh = rx.accept(pkt.pkt_seq)
            ev = None
            if fresh:
                if pkt.kind == K_DONE:
                    ev = self._finish_wr_locked(pkt.wr_seq, True, None)
                else:
                    reason = pkt.payload.decode("utf-8", "replace")
                    ev = self._finish_wr_locked(pkt.wr_seq, False, reason)
        self._send_ack(rx, peer)
        if ev is not None:
            self._cq_push(ev)

    # receiver side

    def _send_ack(self, rx: _PeerRx, endpoint: tuple[str, int]) -> None:
        w = Writer()
        w.u64(rx.cum)
        sel = sorted(rx.oo)[-_ACK_SELECTIVE_MAX:]
        w.u16(len(sel))
        for s in sel:
            w.u64(s)
        frame = encode_packet(K_ACK, self._addr, 0, 0, 0, 0, 0, 0, None, 0,
                              w.take())
        try:
            self._sock.sendto(frame, endpoint)
        except OSError:
            pass

    def _status_locked(self, pkt: Packet, ok: bool, reason: str) -> bytes | None:
        """Queue a reliable WR_DONE / NACK back to the writer; returns the
        frame to send now (or None if the window is full)."""
        tx = self._tx.get(pkt.sender)
        if tx is None:
            tx = self._tx[pkt.sender] = _PeerTx()
        seq = tx.next_seq
        tx.next_seq += 1
        frame = encode_packet(K_DONE if ok else K_NACK, self._addr,
                              pkt.wr_seq, pkt.transfer_id, 0, 0, 0, 0, None,
                              seq, b"" if ok else reason.encode())
        if len(tx.inflight) < SEND_WINDOW:
            tx.inflight[seq] = [frame, -1, time.monotonic(), 0]
            return frame
        tx.unsent.append((frame, seq, -1))
        return None

    def _handle_data(self, pkt: Packet, peer: tuple[str, int]) -> None:
        events: list[Completion] = []
        status: bytes | None = None
        with self._lock:
            rx = self._rx.get(pkt.sender.data)
            if rx is None:
                rx = self._rx[pkt.sender.data] = _PeerRx()
            fresh = rx.accept(pkt.pkt_seq)
            if fresh:
                result, events = self._apply_locked(pkt)
                if result is not None:
                    status = self._status_locked(pkt, result == "",
                                                 result)
        self._send_ack(rx, peer)
        if status is not None:
            try:
                self._sock.sendto(status, peer)
            except OSError:
                pass
        for ev in events:
            self._cq_push(ev)

    def _apply_locked(self, pkt: Packet) -> tuple[str | None, list[Completion]]:
        """Apply one fresh fragment.  Returns (status, events): status is
        None while the WR is incomplete, "" when it just completed cleanly,
        or the error text when it just completed with a failure."""
        now = self._now()
        key = (pkt.sender.data, pkt.wr_seq)
        wr = self._wr_rx.get(key)
        if wr is None:
            wr = self._wr_rx[key] = _RecvWr()
        if wr.done_at is not None or pkt.frag_index in wr.frags:
            return None, []
        wr.frags[pkt.frag_index] = pkt
        if pkt.kind == K_DATA and wr.error is None:
            region = self._regions.get(pkt.rkey)
            end = pkt.dst_offset + len(pkt.payload)
            if region is None:
                wr.error = f"unknown rkey {pkt.rkey}"
            elif end > len(region):
                wr.error = (f"write [{pkt.dst_offset},{end}) outside region "
                            f"of {len(region)}")
            elif pkt.payload:
                region[pkt.dst_offset:end] = pkt.payload
                self._trace.record("frag_apply", vtime=now, wr=pkt.wr_seq,
                                   transfer=pkt.transfer_id,
                                   frag=pkt.frag_index,
                                   sender=pkt.sender.data.hex(),
                                   rkey=pkt.rkey, offset=pkt.dst_offset,
                                   nbytes=len(pkt.payload))
            if wr.error is not None:
                self._trace.record("wr_fail", vtime=now, wr=pkt.wr_seq,
                                   sender=pkt.sender.data.hex(),
                                   error=wr.error)
        if len(wr.frags) < pkt.frag_count:
            return None, []
        wr.done_at = time.monotonic()
        self._prune_done()
        if wr.error is not None:
            wr.frags.clear()
            return wr.error, []
        events: list[Completion] = []
        total = sum(len(p.payload) for p in wr.frags.values())
        self._trace.record("wr_deliver", vtime=now, wr=pkt.wr_seq,
                           transfer=pkt.transfer_id,
                           sender=pkt.sender.data.hex(), nbytes=total,
                           imm=pkt.imm)
        if pkt.kind == K_MSG:
            if not self._recv_pool:
                wr.frags.clear()
                return "no recv posted", []
            if len(self._recv_pool[0]) < total:
                wr.frags.clear()
                return (f"message of {total} bytes exceeds recv buffer "
                        f"of {len(self._recv_pool[0])}"), []
            buf = self._recv_pool.pop(0)
            for p in wr.frags.values():
                buf[p.dst_offset:p.dst_offset + len(p.payload)] = p.payload
            self._trace.record("msg_recv", vtime=now, wr=pkt.wr_seq,
                               sender=pkt.sender.data.hex(), nbytes=total)
            events.append(MsgReceived(buf, total, pkt.sender, now))
        elif pkt.imm is not None:
            self._trace.record("imm_recv", vtime=now, imm=pkt.imm,
                               sender=pkt.sender.data.hex(), wr=pkt.wr_seq)
            events.append(ImmReceived(pkt.imm, now))
        wr.frags.clear()
        return "", events

    def _prune_done(self) -> None:
        cutoff = time.monotonic() - _DONE_TTL_S
        stale = [k for k, wr in self._wr_rx.items()
                 if wr.done_at is not None and wr.done_at < cutoff]
        for k in stale:
            del self._wr_rx[k]


class UdpFabric:
    """Creates UDP rails bound to consecutive ports on one host."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 config: FaultConfig | None = None,
                 rto: float = DEFAULT_RTO_S) -> None:
        self.host = host
        self.port = port
        self.config = config if config is not None else FaultConfig(mtu=DEFAULT_PAYLOAD)
        self.rto = rto
        self.t0 = time.monotonic()
        self._next_engine = 1
        self._lock = threading.Lock()

    def allocate_engine_id(self) -> int:
        with self._lock:
            eid = self._next_engine
            self._next_engine += 1
        return eid

    def create_rail(self, engine_id: int, rail_index: int,
                    trace: TraceRecorder | None = None) -> UdpRail:
        port = self.port + rail_index if self.port else 0
        return UdpRail(self, self.host, port, trace)

    def close(self) -> None:
        pass
