"""In-process simulated fabric.

Reliable, unordered, fragmenting transport connecting every rail created on
one SimFabric.  Payload bytes are applied directly into the destination's
registered buffers (the zero-copy model), possibly scrambled by the
configured reorder mode; immediates and acks are emitted only once the full
WR payload is visible, which is the atomicity contract everything above
relies on.

Timing model (virtual microseconds, independent of wall time):
  start   = max(not_before, rail busy_until) + wr_cost      (payload WRs)
          = not_before + wr_cost                            (zero-length WRs)
  frag i arrives at start + serialize(bytes through i) + latency(i)
  WR delivered at max over fragments; ack = delivered + one more latency draw
Latency draws are keyed by (seed, sender rail, wr key, fragment), so a WR's
timing never depends on what else was in flight.  Zero-length writes skip the
busy_until account entirely: they model control packets and must not perturb
the bandwidth accounting of concurrent payload traffic.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from typing import Callable

from ..errors import RegionError, TransferError
from ..trace import TraceRecorder
from ..wire import NetAddr
from .base import (Completion, FaultConfig, ImmReceived, MsgReceived, Rail,
                   SendDone, fragment_ranges, MAX_WR_LEN)

logger = logging.getLogger(__name__)

_FLUSH_IDLE_S = 1e-3
_FLUSH_PERIOD_S = 5e-4

_WRITE = 0
_MSG = 1


class _Packet:
    __slots__ = ("src", "reply_to", "wr_key", "transfer_id", "kind", "rkey",
                 "dst_offset", "data", "frag_index", "frag_count", "imm",
                 "arrive", "deliver", "ack", "total_len", "msg_offset")

    def __init__(self, **kw: object) -> None:
        for k, v in kw.items():
            setattr(self, k, v)


class _WrState:
    __slots__ = ("remaining", "failed", "buf")

    def __init__(self, frag_count: int) -> None:
        self.remaining = frag_count
        self.failed = False
        self.buf: bytearray | None = None


class _ReorderUnit:
    """Decides the real apply order of incoming packets at one endpoint."""

    def __init__(self, cfg: FaultConfig, key: int) -> None:
        self._mode = cfg.reorder
        self._window = cfg.window
        self._rng = random.Random((cfg.seed << 1) ^ key)
        self._held: list[_Packet] = []
        self.last_push = time.monotonic()

    def push(self, pkt: _Packet) -> list[_Packet]:
        self.last_push = time.monotonic()
        if self._mode == "none":
            return [pkt]
        self._held.append(pkt)
        out: list[_Packet] = []
        if self._mode == "random":
            while len(self._held) > self._window:
                out.append(self._held.pop(self._rng.randrange(len(self._held))))
        elif len(self._held) >= self._window:
            out.extend(reversed(self._held))
            self._held.clear()
        return out

    def flush(self) -> list[_Packet]:
        if not self._held:
            return []
        if self._mode == "random":
            self._rng.shuffle(self._held)
        else:
            self._held.reverse()
        out = self._held
        self._held = []
        return out

    def __len__(self) -> int:
        return len(self._held)


class SimRail(Rail):
    def __init__(self, fabric: "SimFabric", addr: NetAddr,
                 trace: TraceRecorder | None) -> None:
        self._fabric = fabric
        self._cfg = fabric.config
        self._addr = addr
        self._addr_key = int.from_bytes(addr.data, "little")
        self._trace = trace if trace is not None else TraceRecorder(addr.data.hex())
        self._busy_until = 0.0
        self._inflight = 0
        # receive-side state, guarded by _rx_lock (taken by remote posters)
        self._rx_lock = threading.Lock()
        self._regions: dict[int, memoryview] = {}
        self._recv_pool: list[bytearray] = []
        self._wrs: dict[tuple[bytes, int], _WrState] = {}
        self._reorder = _ReorderUnit(self._cfg, self._addr_key)
        # completion queue, filled from any thread, drained by the owner
        self._cq_lock = threading.Lock()
        self._cq: list[Completion] = []
        self.on_event: Callable[[], None] | None = None
        self._closed = False

    @property
    def addr(self) -> NetAddr:
        return self._addr

    @property
    def trace(self) -> TraceRecorder:
        return self._trace

    def register(self, rkey: int, buf: memoryview) -> None:
        if buf.readonly:
            raise RegionError("registered region must be writable")
        with self._rx_lock:
            if rkey in self._regions:
                raise RegionError(f"rkey {rkey} already registered")
            self._regions[rkey] = buf

    def deregister(self, rkey: int) -> None:
        with self._rx_lock:
            if self._regions.pop(rkey, None) is None:
                raise RegionError(f"rkey {rkey} not registered")

    def post_recv(self, buf: bytearray) -> None:
        with self._rx_lock:
            self._recv_pool.append(buf)

    def _timings(self, nbytes: int, wr_key: int, not_before: float,
                 ) -> tuple[float, list[tuple[int, int, float]], float, float]:
        cfg = self._cfg
        if nbytes == 0:
            start = not_before + cfg.wr_cost_us
        else:
            start = max(not_before, self._busy_until) + cfg.wr_cost_us
            self._busy_until = start + cfg.serialize_us(nbytes)
        frags = []
        cum = 0
        for i, (off, sz) in enumerate(fragment_ranges(nbytes, cfg.mtu)):
            cum += sz
            arrive = start + cfg.serialize_us(cum) + cfg.latency_us(self._addr_key, wr_key, i)
            frags.append((off, sz, arrive))
        deliver = max(a for _, _, a in frags)
        ack = deliver + cfg.latency_us(self._addr_key, wr_key, 0xFFFFFFFF)
        return start, frags, deliver, ack

    def _post(self, kind: int, dst: NetAddr, rkey: int, dst_offset: int,
              payload: bytes | memoryview, imm: int | None, wr_key: int,
              not_before: float, transfer_id: int) -> bool:
        if self._closed:
            raise TransferError("rail is closed")
        if len(payload) > MAX_WR_LEN:
            raise TransferError(f"WR length {len(payload)} exceeds {MAX_WR_LEN}")
        if kind == _WRITE and len(payload) == 0 and imm is None:
            raise TransferError("zero-length write requires an immediate")
        target = self._fabric.lookup(dst)
        with self._cq_lock:
            if self._inflight >= self._cfg.queue_depth:
                return False
            self._inflight += 1
        start, frags, deliver, ack = self._timings(len(payload), wr_key, not_before)
        n = len(frags)
        packets = [
            _Packet(src=self._addr, reply_to=self, wr_key=wr_key,
                    transfer_id=transfer_id, kind=kind, rkey=rkey,
                    dst_offset=dst_offset + off,
                    data=bytes(payload[off:off + sz]),
                    frag_index=i, frag_count=n, imm=imm, arrive=arrive,
                    deliver=deliver, ack=ack, total_len=len(payload),
                    msg_offset=off)
            for i, (off, sz, arrive) in enumerate(frags)
        ]
        self._trace.record("wr_post", vtime=start, rail=self._addr.data.hex(),
                           wr=wr_key, transfer=transfer_id, nbytes=len(payload),
                           imm=imm, dst=dst.data.hex(),
                           kind="write" if kind == _WRITE else "msg")
        target._accept(packets)
        return True

    def post_write(self, dst: NetAddr, rkey: int, dst_offset: int,
                   payload: bytes | memoryview, imm: int | None, wr_key: int,
                   not_before: float, transfer_id: int) -> bool:
        return self._post(_WRITE, dst, rkey, dst_offset, payload, imm,
                          wr_key, not_before, transfer_id)

    def post_msg(self, dst: NetAddr, payload: bytes | memoryview, wr_key: int,
                 not_before: float, transfer_id: int) -> bool:
        return self._post(_MSG, dst, 0, 0, payload, None, wr_key,
                          not_before, transfer_id)

    def poll(self, max_events: int = 64) -> list[Completion]:
        with self._cq_lock:
            out = self._cq[:max_events]
            del self._cq[:max_events]
        return out

    def close(self) -> None:
        self._closed = True
        self._fabric._remove(self._addr)

    # receive path, may run on any posting or flushing thread

    def _accept(self, packets: list[_Packet]) -> None:
        with self._rx_lock:
            released: list[_Packet] = []
            for pkt in packets:
                released.extend(self._reorder.push(pkt))
            for pkt in released:
                self._apply(pkt)

    def _flush_if_idle(self, now: float) -> None:
        with self._rx_lock:
            if len(self._reorder) and now - self._reorder.last_push > _FLUSH_IDLE_S:
                for pkt in self._reorder.flush():
                    self._apply(pkt)

    def _apply(self, pkt: _Packet) -> None:
        key = (pkt.src.data, pkt.wr_key)
        st = self._wrs.get(key)
        if st is None:
            st = self._wrs[key] = _WrState(pkt.frag_count)
        if not st.failed:
            if pkt.kind == _WRITE:
                err = self._apply_write(pkt)
            else:
                err = self._apply_msg_frag(pkt, st)
            if err is not None:
                st.failed = True
                self._trace.record("wr_fail", vtime=pkt.arrive, wr=pkt.wr_key,
                                   transfer=pkt.transfer_id,
                                   sender=pkt.src.data.hex(), error=err)
                pkt.reply_to._cq_push(SendDone(pkt.wr_key, False, pkt.ack, err))
        st.remaining -= 1
        if st.remaining > 0:
            return
        del self._wrs[key]
        if st.failed:
            return
        self._trace.record("wr_deliver", vtime=pkt.deliver, wr=pkt.wr_key,
                           transfer=pkt.transfer_id, sender=pkt.src.data.hex(),
                           nbytes=pkt.total_len, imm=pkt.imm)
        if pkt.kind == _MSG:
            err = self._deliver_msg(pkt, st)
            if err is not None:
                pkt.reply_to._cq_push(SendDone(pkt.wr_key, False, pkt.ack, err))
                return
        elif pkt.imm is not None:
            self._trace.record("imm_recv", vtime=pkt.deliver, imm=pkt.imm,
                               sender=pkt.src.data.hex(), wr=pkt.wr_key)
            self._cq_push(ImmReceived(pkt.imm, pkt.deliver))
        pkt.reply_to._cq_push(SendDone(pkt.wr_key, True, pkt.ack))

    def _apply_write(self, pkt: _Packet) -> str | None:
        region = self._regions.get(pkt.rkey)
        if region is None:
            return f"unknown rkey {pkt.rkey}"
        end = pkt.dst_offset + len(pkt.data)
        if end > len(region):
            return f"write [{pkt.dst_offset},{end}) outside region of {len(region)}"
        if pkt.data:
            region[pkt.dst_offset:end] = pkt.data
            self._trace.record("frag_apply", vtime=pkt.arrive, wr=pkt.wr_key,
                               transfer=pkt.transfer_id, frag=pkt.frag_index,
                               sender=pkt.src.data.hex(), rkey=pkt.rkey,
                               offset=pkt.dst_offset, nbytes=len(pkt.data))
        return None

    def _apply_msg_frag(self, pkt: _Packet, st: _WrState) -> str | None:
        if st.buf is None:
            st.buf = bytearray(pkt.total_len)
        st.buf[pkt.msg_offset:pkt.msg_offset + len(pkt.data)] = pkt.data
        return None

    def _deliver_msg(self, pkt: _Packet, st: _WrState) -> str | None:
        if not self._recv_pool:
            return "no recv posted"
        if len(self._recv_pool[0]) < pkt.total_len:
            return (f"message of {pkt.total_len} bytes exceeds recv buffer "
                    f"of {len(self._recv_pool[0])}")
        buf = self._recv_pool.pop(0)
        data = st.buf if st.buf is not None else bytearray()
        buf[: pkt.total_len] = data
        self._trace.record("msg_recv", vtime=pkt.deliver, wr=pkt.wr_key,
                           sender=pkt.src.data.hex(), nbytes=pkt.total_len)
        self._cq_push(MsgReceived(buf, pkt.total_len, pkt.src, pkt.deliver))
        return None

    def _cq_push(self, ev: Completion) -> None:
        with self._cq_lock:
            if isinstance(ev, SendDone):
                self._inflight -= 1
            self._cq.append(ev)
        cb = self.on_event
        if cb is not None:
            cb()


class SimFabric:
    """Registry of rails plus the background flusher for reorder buffers."""

    def __init__(self, config: FaultConfig | None = None) -> None:
        self.config = config if config is not None else FaultConfig()
        self._lock = threading.Lock()
        self._rails: dict[NetAddr, SimRail] = {}
        self._next_engine = 1
        self._stop = threading.Event()
        self._flusher: threading.Thread | None = None

    def allocate_engine_id(self) -> int:
        with self._lock:
            eid = self._next_engine
            self._next_engine += 1
        return eid

    def create_rail(self, engine_id: int, rail_index: int,
                    trace: TraceRecorder | None = None) -> SimRail:
        addr = NetAddr.for_sim(engine_id, rail_index)
        rail = SimRail(self, addr, trace)
        with self._lock:
            if addr in self._rails:
                raise TransferError(f"rail {addr!r} already exists")
            self._rails[addr] = rail
            if self._flusher is None and self.config.reorder != "none":
                self._flusher = threading.Thread(target=self._flush_loop,
                                                 name="sim-flusher", daemon=True)
                self._flusher.start()
        return rail

    def lookup(self, addr: NetAddr) -> SimRail:
        with self._lock:
            rail = self._rails.get(addr)
        if rail is None:
            raise TransferError(f"unreachable peer {addr!r}")
        return rail

    def _remove(self, addr: NetAddr) -> None:
        with self._lock:
            self._rails.pop(addr, None)

    def flush(self) -> None:
        with self._lock:
            rails = list(self._rails.values())
        for rail in rails:
            with rail._rx_lock:
                for pkt in rail._reorder.flush():
                    rail._apply(pkt)

    def _flush_loop(self) -> None:
        while not self._stop.wait(_FLUSH_PERIOD_S):
            now = time.monotonic()
            with self._lock:
                rails = list(self._rails.values())
            for rail in rails:
                rail._flush_if_idle(now)

    def close(self) -> None:
        self._stop.set()
        if self._flusher is not None:
            self._flusher.join(timeout=1.0)
            self._flusher = None
