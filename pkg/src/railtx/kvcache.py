"""Prefill-to-decode KV page transfer protocol.

A decoder pre-allocates KV pages and a context slot, arms an
immediate-count expectation, and only then sends the prefill request.  The
prefiller simulates prefill compute with a host thread that fills one
(chunk, layer) worth of pages at a time and bumps a watcher word; the
watcher callback turns every observed step into one paged write carrying
the request's immediate, and after the final step also sends the opaque
context blob.  The expectation therefore fires exactly when
layers x chunks + 1 writes have landed, so decode never starts early no
matter how the fabric reorders deliveries.

Requests are cancellable: the decoder asks, the prefiller stops issuing,
drains writes it already posted, and only then confirms; after the
confirmation lands no transfer can touch the request's pages.  Liveness is
covered by heartbeats; a silent prefiller gets its request cancelled and
the pages reclaimed once the reachability timeout expires.

Message encodings are fixed and documented in docs/wire.md.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .engine import CompletionFlag, ImmFlag, TransferEngine
from .errors import ProtocolError, ScheduleError, TransferError, WireError
from .wire import (MrDesc, MrHandle, NetAddr, Pages, Reader, Writer,
                   read_mrdesc, write_mrdesc)

logger = logging.getLogger(__name__)

MSG_PREFILL_REQ = 1
MSG_HEARTBEAT = 2
MSG_CANCEL = 3
MSG_CANCEL_CONFIRM = 4

HEARTBEAT_INTERVAL_S = 0.1
HEARTBEAT_MISSES = 3
IMM_RING_SIZE = 1 << 16

_RECV_BYTES = 1 << 16
_RECV_COUNT = 64


# --------------------------------------------------------------------- layout


@dataclass(frozen=True)
class KvLayout:
    """Shape of one request's KV payload.

    Pages are laid out heads before pages: a region holds
    layers x heads x slots pages, page index (l, h, s) = (l*heads + h)*slots + s.
    """

    layers: int
    chunks: int
    pages_per_chunk: int
    page_len: int

    def __post_init__(self) -> None:
        if self.layers < 0 or self.chunks < 0:
            raise ProtocolError("negative layer or chunk count")
        if self.pages_per_chunk <= 0 or self.page_len <= 0:
            raise ProtocolError("pages per chunk and page length must be positive")

    @property
    def steps(self) -> int:
        return self.layers * self.chunks

    @property
    def slots(self) -> int:
        return self.chunks * self.pages_per_chunk

    @property
    def expected_transfers(self) -> int:
        """One paged write per (chunk, layer) plus the context write."""
        return self.steps + 1

    def chunk_slots(self, chunk: int) -> range:
        k = self.pages_per_chunk
        return range(chunk * k, (chunk + 1) * k)

    def region_bytes(self, heads: int, slots: int) -> int:
        return self.layers * heads * slots * self.page_len

    def page_index(self, heads: int, slots: int, layer: int, head: int,
                   slot: int) -> int:
        return (layer * heads + head) * slots + slot


@dataclass(frozen=True)
class ShardMap:
    """How attention heads map onto decoder ranks.

    `mla` replicates: every rank receives all heads.  `gqa` slices: rank r
    owns the contiguous head range [r*heads/ranks, (r+1)*heads/ranks).
    """

    mode: str
    heads: int
    ranks: int

    def __post_init__(self) -> None:
        if self.mode not in ("mla", "gqa"):
            raise ProtocolError(f"unknown shard mode {self.mode!r}")
        if self.heads <= 0 or self.ranks <= 0:
            raise ProtocolError("heads and ranks must be positive")
        if self.mode == "gqa" and self.heads % self.ranks:
            raise ProtocolError(
                f"{self.heads} heads do not slice evenly over {self.ranks} ranks")

    def head_range(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.ranks:
            raise ProtocolError(f"rank {rank} outside 0..{self.ranks - 1}")
        if self.mode == "mla":
            return 0, self.heads
        per = self.heads // self.ranks
        return rank * per, (rank + 1) * per

    def local_heads(self, rank: int) -> int:
        lo, hi = self.head_range(rank)
        return hi - lo


def match_replicas(prefillers: Sequence[NetAddr],
                   rng: np.random.Generator) -> list[NetAddr]:
    """Random one-to-one matching of decoder ranks to prefiller ranks."""
    if not prefillers:
        raise ScheduleError("no prefiller available")
    order = rng.permutation(len(prefillers))
    return [prefillers[i] for i in order]


class RoundRobin:
    """Test-grade scheduler: hands out prefillers in fixed rotation."""

    def __init__(self, prefillers: Sequence[NetAddr]) -> None:
        self._prefillers = list(prefillers)
        self._i = 0
        self._lock = threading.Lock()

    def pick(self) -> NetAddr:
        with self._lock:
            if not self._prefillers:
                raise ScheduleError("no prefiller available")
            addr = self._prefillers[self._i % len(self._prefillers)]
            self._i += 1
            return addr


# ------------------------------------------------------------------- payloads


def page_bytes(request_id: int, layer: int, head: int, slot: int,
               page_len: int) -> bytes:
    """Deterministic page content keyed by global (request, layer, head, slot)."""
    seq = np.random.SeedSequence([request_id & 0xFFFFFFFF, layer, head, slot])
    return np.random.default_rng(seq).bytes(page_len)


def context_bytes(request_id: int, length: int) -> bytes:
    seq = np.random.SeedSequence([request_id & 0xFFFFFFFF, 0xC0DE])
    return np.random.default_rng(seq).bytes(length)


# ------------------------------------------------------------------- messages


@dataclass(frozen=True)
class PrefillRequest:
    request_id: int
    token_count: int
    layout: KvLayout
    head_lo: int
    head_hi: int
    dst_heads: int
    dst_slots: int
    kv_desc: MrDesc
    slot_list: tuple[int, ...]
    ctx_desc: MrDesc
    ctx_off: int
    ctx_len: int
    imm: int
    expected: int

    def __post_init__(self) -> None:
        if self.head_hi <= self.head_lo:
            raise ProtocolError("empty head range")
        if self.dst_heads != self.head_hi - self.head_lo:
            raise ProtocolError("destination head count does not match the slice")
        if len(self.slot_list) != self.layout.slots:
            raise ProtocolError(
                f"{len(self.slot_list)} slots for a layout of {self.layout.slots}")
        if len(set(self.slot_list)) != len(self.slot_list):
            raise ProtocolError("duplicate destination page slots")

    def encode(self) -> bytes:
        w = Writer()
        w.u8(MSG_PREFILL_REQ)
        w.u64(self.request_id).u32(self.token_count)
        w.u16(self.layout.layers).u16(self.layout.chunks)
        w.u16(self.layout.pages_per_chunk).u32(self.layout.page_len)
        w.u16(self.head_lo).u16(self.head_hi)
        w.u16(self.dst_heads).u32(self.dst_slots)
        write_mrdesc(w, self.kv_desc)
        w.u32(len(self.slot_list))
        for s in self.slot_list:
            w.u32(s)
        write_mrdesc(w, self.ctx_desc)
        w.u64(self.ctx_off).u64(self.ctx_len)
        w.u32(self.imm).u32(self.expected)
        return w.take()

    @staticmethod
    def decode(buf: bytes) -> "PrefillRequest":
        r = Reader(buf)
        if r.u8() != MSG_PREFILL_REQ:
            raise WireError("not a prefill request")
        request_id = r.u64()
        token_count = r.u32()
        layout = KvLayout(layers=r.u16(), chunks=r.u16(),
                          pages_per_chunk=r.u16(), page_len=r.u32())
        head_lo, head_hi = r.u16(), r.u16()
        dst_heads, dst_slots = r.u16(), r.u32()
        kv_desc = read_mrdesc(r)
        slot_list = tuple(r.u32() for _ in range(r.u32()))
        ctx_desc = read_mrdesc(r)
        ctx_off, ctx_len = r.u64(), r.u64()
        imm, expected = r.u32(), r.u32()
        r.finish()
        return PrefillRequest(request_id, token_count, layout, head_lo,
                              head_hi, dst_heads, dst_slots, kv_desc,
                              slot_list, ctx_desc, ctx_off, ctx_len, imm,
                              expected)


def encode_heartbeat(request_id: int, progress: int) -> bytes:
    return Writer().u8(MSG_HEARTBEAT).u64(request_id).u32(progress).take()


def encode_cancel(request_id: int) -> bytes:
    return Writer().u8(MSG_CANCEL).u64(request_id).take()


def encode_cancel_confirm(request_id: int, progress: int) -> bytes:
    return Writer().u8(MSG_CANCEL_CONFIRM).u64(request_id).u32(progress).take()


# ------------------------------------------------------------------ lifecycle


class CancelState(enum.Enum):
    ACTIVE = "active"
    CANCEL_REQUESTED = "cancel_requested"
    CONFIRMED = "confirmed"


class CancellationToken:
    """Per-request cancellation lifecycle; pages reuse gates on CONFIRMED."""

    def __init__(self, request_id: int) -> None:
        self.request_id = request_id
        self.state = CancelState.ACTIVE

    def request_cancel(self) -> None:
        if self.state is CancelState.ACTIVE:
            self.state = CancelState.CANCEL_REQUESTED

    def confirm(self) -> None:
        if self.state is CancelState.ACTIVE:
            raise ProtocolError("confirmation without a cancel request")
        self.state = CancelState.CONFIRMED

    @property
    def pages_reusable(self) -> bool:
        return self.state is CancelState.CONFIRMED


class ImmRing:
    """Allocator over a ring of imm values; a value stays out until retired."""

    def __init__(self, base: int = 0, size: int = IMM_RING_SIZE) -> None:
        if base < 0 or base + size > (1 << 32):
            raise ProtocolError("imm ring outside the u32 range")
        self._base = base
        self._size = size
        self._next = 0
        self._inuse: set[int] = set()
        self._lock = threading.Lock()

    def take(self) -> int:
        with self._lock:
            if len(self._inuse) >= self._size:
                raise ProtocolError("imm ring exhausted")
            while True:
                imm = self._base + self._next % self._size
                self._next += 1
                if imm not in self._inuse:
                    self._inuse.add(imm)
                    return imm

    def retire(self, imm: int) -> None:
        with self._lock:
            self._inuse.discard(imm)


class LayerClock:
    """Strictly increasing step counter mirrored into an engine watcher."""

    def __init__(self, watcher, steps: int) -> None:
        self._watcher = watcher
        self._value = 0
        self.steps = steps

    @property
    def value(self) -> int:
        return self._value

    def advance(self) -> int:
        if self._value >= self.steps:
            raise ProtocolError(f"layer clock past its final value {self.steps}")
        self._value += 1
        self._watcher.store(self._value)
        return self._value


class _ProtoThread:
    """Single thread that owns all per-request state of one node."""

    def __init__(self, name: str) -> None:
        self._q: queue.SimpleQueue[Callable[[], None] | None] = queue.SimpleQueue()
        self._t = threading.Thread(target=self._run, name=name, daemon=True)
        self._t.start()

    def post(self, fn: Callable[[], None]) -> None:
        self._q.put(fn)

    def _run(self) -> None:
        while True:
            fn = self._q.get()
            if fn is None:
                return
            try:
                fn()
            except Exception:
                logger.exception("protocol handler failed")

    def close(self) -> None:
        self._q.put(None)
        self._t.join(timeout=5.0)


# ------------------------------------------------------------------ prefiller


class _PrefillJob:
    def __init__(self, req: PrefillRequest, requester: NetAddr) -> None:
        self.req = req
        self.requester = requester
        self.cancelled = threading.Event()
        self.flags: list[CompletionFlag] = []
        self.kv: np.ndarray | None = None
        self.ctx: np.ndarray | None = None
        self.kv_handle: MrHandle | None = None
        self.ctx_handle: MrHandle | None = None
        self.clock: LayerClock | None = None
        self.watcher = None
        self.compute: threading.Thread | None = None


class PrefillerNode:
    """Serves prefill requests: fills pages chunk by chunk and pushes them.

    Compute is a host thread per request; it bumps the layer clock after
    each (chunk, layer) fill and the watcher callback issues the transfers.
    """

    def __init__(self, engine: TransferEngine, *,
                 heartbeat_s: float = HEARTBEAT_INTERVAL_S,
                 step_delay_s: float = 0.0) -> None:
        self.engine = engine
        self.heartbeat_s = heartbeat_s
        self.step_delay_s = step_delay_s
        self._jobs: dict[int, _PrefillJob] = {}
        self._confirmed: set[int] = set()
        self._lock = threading.Lock()
        self._proto = _ProtoThread(f"{engine.name}-kvproto")
        self._stop = threading.Event()
        self._killed = False
        engine.submit_recvs(_RECV_BYTES, _RECV_COUNT, self._on_msg)
        self._ticker = threading.Thread(target=self._heartbeat_loop,
                                        name=f"{engine.name}-kvhb", daemon=True)
        self._ticker.start()

    @property
    def address(self) -> NetAddr:
        return self.engine.main_address()

    def _on_msg(self, buf: memoryview, sender: NetAddr) -> None:
        data = bytes(buf)
        self._proto.post(lambda: self._dispatch(data, sender))

    def _dispatch(self, data: bytes, sender: NetAddr) -> None:
        if self._killed or not data:
            return
        kind = data[0]
        if kind == MSG_PREFILL_REQ:
            self._handle_request(PrefillRequest.decode(data), sender)
        elif kind == MSG_CANCEL:
            r = Reader(data)
            r.u8()
            rid = r.u64()
            r.finish()
            self._handle_cancel(rid, sender)
        else:
            logger.warning("prefiller ignoring message kind %d", kind)

    def _handle_request(self, req: PrefillRequest, requester: NetAddr) -> None:
        if req.request_id in self._jobs or req.request_id in self._confirmed:
            logger.warning("duplicate prefill request %d", req.request_id)
            return
        job = _PrefillJob(req, requester)
        layout = req.layout
        nh = req.head_hi - req.head_lo
        kv_bytes = layout.region_bytes(nh, layout.slots)
        job.ctx = np.frombuffer(bytearray(context_bytes(req.request_id,
                                                        req.ctx_len)),
                                dtype=np.uint8)
        job.ctx_handle, _ = self.engine.reg_mr(job.ctx)
        with self._lock:
            self._jobs[req.request_id] = job
        self.engine.trace.record("kv_accept", request=req.request_id,
                                 steps=layout.steps)
        if layout.steps == 0:
            self._send_context(job)
            return
        job.kv = np.zeros(kv_bytes, dtype=np.uint8)
        job.kv_handle, _ = self.engine.reg_mr(job.kv)
        rid = req.request_id
        job.watcher = self.engine.alloc_watcher(
            lambda old, new, rid=rid: self._proto.post(
                lambda: self._on_progress(rid, old, new)))
        job.clock = LayerClock(job.watcher, layout.steps)
        job.compute = threading.Thread(target=self._compute, args=(job,),
                                       name=f"kvfill-{rid}", daemon=True)
        job.compute.start()

    def _compute(self, job: _PrefillJob) -> None:
        req = job.req
        layout = req.layout
        nh = req.head_hi - req.head_lo
        B = layout.page_len
        for chunk in range(layout.chunks):
            for layer in range(layout.layers):
                if job.cancelled.is_set() or self._stop.is_set():
                    return
                for j in range(nh):
                    for slot in layout.chunk_slots(chunk):
                        idx = layout.page_index(nh, layout.slots, layer, j, slot)
                        job.kv[idx * B:(idx + 1) * B] = np.frombuffer(
                            page_bytes(req.request_id, layer, req.head_lo + j,
                                       slot, B), dtype=np.uint8)
                if self.step_delay_s:
                    time.sleep(self.step_delay_s)
                job.clock.advance()

    def _on_progress(self, rid: int, old: int, new: int) -> None:
        job = self._jobs.get(rid)
        if job is None or job.cancelled.is_set() or self._killed:
            return
        req = job.req
        layout = req.layout
        nh = req.head_hi - req.head_lo
        for step in range(old + 1, new + 1):
            chunk, layer = divmod(step - 1, layout.layers)
            src, dst = [], []
            for j in range(nh):
                for slot in layout.chunk_slots(chunk):
                    src.append(layout.page_index(nh, layout.slots, layer, j,
                                                 slot))
                    dst.append((layer * req.dst_heads + j) * req.dst_slots
                               + req.slot_list[slot])
            flag = self.engine.submit_paged_writes(
                layout.page_len,
                (job.kv_handle, Pages(tuple(src), layout.page_len)),
                (req.kv_desc, Pages(tuple(dst), layout.page_len)),
                imm=req.imm, label=f"kv.{rid}.c{chunk}.l{layer}")
            job.flags.append(flag)
        if new == layout.steps:
            self._send_context(job)

    def _send_context(self, job: _PrefillJob) -> None:
        req = job.req
        flag = self.engine.submit_single_write(
            req.ctx_len, (job.ctx_handle, 0), (req.ctx_desc, req.ctx_off),
            imm=req.imm, label=f"kv.{req.request_id}.ctx")
        job.flags.append(flag)

    def _handle_cancel(self, rid: int, sender: NetAddr) -> None:
        with self._lock:
            job = self._jobs.pop(rid, None)
        if job is None:
            if rid in self._confirmed:
                self.engine.submit_send(sender, encode_cancel_confirm(rid, 0))
            return
        job.cancelled.set()
        if job.compute is not None:
            job.compute.join(timeout=5.0)
        # every posted write must be durable before we promise the pages
        # are quiet; only then is reuse on the decoder safe
        for f in job.flags:
            try:
                f.wait(10.0)
            except TransferError:
                pass
        progress = job.clock.value if job.clock is not None else 0
        self._confirmed.add(rid)
        self.engine.trace.record("kv_cancelled", request=rid,
                                 progress=progress)
        self.engine.submit_send(sender, encode_cancel_confirm(rid, progress))
        self._release_job(job)

    def _release_job(self, job: _PrefillJob) -> None:
        if job.watcher is not None:
            self.engine.free_watcher(job.watcher)
        for h in (job.kv_handle, job.ctx_handle):
            if h is not None:
                try:
                    self.engine.dereg_mr(h)
                except Exception:
                    pass

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_s):
            if self._killed:
                continue
            with self._lock:
                jobs = list(self._jobs.values())
            for job in jobs:
                if job.cancelled.is_set():
                    continue
                progress = job.clock.value if job.clock is not None else 0
                try:
                    self.engine.submit_send(
                        job.requester,
                        encode_heartbeat(job.req.request_id, progress))
                except TransferError:
                    pass

    def job_done(self, rid: int, timeout: float = 30.0) -> bool:
        """Wait until every transfer of a request is durably acknowledged."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                job = self._jobs.get(rid)
            if job is None:
                return True
            expected = job.req.layout.steps + 1
            if len(job.flags) == expected and all(f.done for f in job.flags):
                return True
            time.sleep(1e-3)
        return False

    def retire(self, rid: int) -> None:
        with self._lock:
            job = self._jobs.pop(rid, None)
        if job is not None:
            self._release_job(job)

    def kill(self) -> None:
        """Go silent without confirming anything: simulates a dead node."""
        self._killed = True
        with self._lock:
            jobs = list(self._jobs.values())
        for job in jobs:
            job.cancelled.set()

    def close(self) -> None:
        self._stop.set()
        with self._lock:
            jobs = list(self._jobs.values())
            self._jobs.clear()
        for job in jobs:
            job.cancelled.set()
            if job.compute is not None:
                job.compute.join(timeout=2.0)
            self._release_job(job)
        self._ticker.join(timeout=2.0)
        self._proto.close()


# -------------------------------------------------------------------- decoder


class KvTicket:
    """Decoder-side handle for one in-flight prefill request."""

    def __init__(self, request_id: int, imm: int, flag: ImmFlag,
                 slots: tuple[int, ...], ctx: np.ndarray | None,
                 ctx_handle: MrHandle, own_ctx: bool,
                 prefiller: NetAddr, token: CancellationToken) -> None:
        self.request_id = request_id
        self.imm = imm
        self.flag = flag
        self.slots = slots
        self.ctx = ctx
        self.ctx_handle = ctx_handle
        self.own_ctx = own_ctx
        self.prefiller = prefiller
        self.token = token
        self.last_heartbeat = time.monotonic()
        self.progress = 0
        self.cancel_sent_at: float | None = None
        self.completed = threading.Event()
        self.released = False

    def wait(self, timeout: float | None = None) -> bool:
        return self.completed.wait(timeout)


class DecoderNode:
    """Holds the KV page pool and drives request dispatch and liveness."""

    def __init__(self, engine: TransferEngine, layout: KvLayout, *,
                 pool_slots: int, local_heads: int = 1,
                 heartbeat_s: float = HEARTBEAT_INTERVAL_S,
                 misses: int = HEARTBEAT_MISSES, imm_base: int = 0,
                 on_complete: Callable[[KvTicket], None] | None = None) -> None:
        if pool_slots <= 0 or local_heads <= 0:
            raise ProtocolError("pool slots and local heads must be positive")
        self.engine = engine
        self.layout = layout
        self.pool_slots = pool_slots
        self.local_heads = local_heads
        self.heartbeat_s = heartbeat_s
        self.misses = misses
        self.on_complete = on_complete
        self.kv = np.zeros(layout.region_bytes(local_heads, pool_slots),
                           dtype=np.uint8)
        self.kv_handle, self.kv_desc = engine.reg_mr(self.kv)
        self._free = list(range(pool_slots))
        self._ring = ImmRing(base=imm_base)
        self._tickets: dict[int, KvTicket] = {}
        self._lock = threading.Lock()
        self._next_rid = (engine.engine_id << 32) | 1
        self._proto = _ProtoThread(f"{engine.name}-kvproto")
        self._stop = threading.Event()
        engine.submit_recvs(_RECV_BYTES, _RECV_COUNT, self._on_msg)
        self._monitor = threading.Thread(target=self._monitor_loop,
                                         name=f"{engine.name}-kvmon",
                                         daemon=True)
        self._monitor.start()

    @property
    def address(self) -> NetAddr:
        return self.engine.main_address()

    # ------------------------------------------------------------- dispatch

    def request_prefill(self, prefiller: NetAddr, *, token_count: int = 0,
                        head_lo: int = 0, head_hi: int | None = None,
                        ctx_len: int = 4096,
                        ctx: tuple[MrHandle, int, int] | None = None,
                        ) -> KvTicket:
        if prefiller is None:
            raise ScheduleError("no prefiller available")
        layout = self.layout
        if head_hi is None:
            head_hi = head_lo + self.local_heads
        if head_hi - head_lo != self.local_heads:
            raise ProtocolError(
                f"head slice [{head_lo},{head_hi}) does not fit "
                f"{self.local_heads} local heads")
        with self._lock:
            if len(self._free) < layout.slots:
                raise ScheduleError(
                    f"{len(self._free)} free KV slots, request needs "
                    f"{layout.slots}")
            slots = tuple(self._free.pop() for _ in range(layout.slots))
            rid = self._next_rid
            self._next_rid += 1
        try:
            if ctx is None:
                ctx_buf = np.zeros(ctx_len, dtype=np.uint8)
                ctx_handle, ctx_desc = self.engine.reg_mr(ctx_buf)
                ctx_off = 0
            else:
                ctx_handle, ctx_off, ctx_len = ctx
                ctx_desc = self.engine.desc_of(ctx_handle)
                rec_len = ctx_desc.length
                if ctx_off + ctx_len > rec_len:
                    raise ProtocolError("context slice outside its region")
                ctx_buf = None
            imm = self._ring.take()
            req = PrefillRequest(
                request_id=rid, token_count=token_count, layout=layout,
                head_lo=head_lo, head_hi=head_hi, dst_heads=self.local_heads,
                dst_slots=self.pool_slots, kv_desc=self.kv_desc,
                slot_list=slots, ctx_desc=ctx_desc, ctx_off=ctx_off,
                ctx_len=ctx_len, imm=imm, expected=layout.expected_transfers)
        except Exception:
            with self._lock:
                self._free.extend(slots)
            raise
        # the expectation must exist before the prefiller can see the
        # request, otherwise an early write could race the arm
        flag = self.engine.expect_imm_count(
            imm, req.expected,
            cb=lambda _f, rid=rid: self._proto.post(
                lambda: self._on_fire(rid)))
        ticket = KvTicket(rid, imm, flag, slots, ctx_buf, ctx_handle,
                          own_ctx=ctx is None, prefiller=prefiller,
                          token=CancellationToken(rid))
        with self._lock:
            self._tickets[rid] = ticket
        self.engine.trace.record("kv_request", request=rid, imm=imm,
                                 expected=req.expected)
        self.engine.submit_send(prefiller, req.encode())
        return ticket

    # ------------------------------------------------------------- messages

    def _on_msg(self, buf: memoryview, sender: NetAddr) -> None:
        data = bytes(buf)
        self._proto.post(lambda: self._dispatch(data, sender))

    def _dispatch(self, data: bytes, sender: NetAddr) -> None:
        if not data:
            return
        kind = data[0]
        r = Reader(data)
        r.u8()
        if kind == MSG_HEARTBEAT:
            rid, progress = r.u64(), r.u32()
            r.finish()
            t = self._tickets.get(rid)
            if t is not None:
                t.last_heartbeat = time.monotonic()
                t.progress = progress
        elif kind == MSG_CANCEL_CONFIRM:
            rid, progress = r.u64(), r.u32()
            r.finish()
            self._confirmed(rid, progress)
        else:
            logger.warning("decoder ignoring message kind %d", kind)

    def _on_fire(self, rid: int) -> None:
        t = self._tickets.get(rid)
        if t is None or t.completed.is_set():
            return
        if t.token.state is not CancelState.ACTIVE:
            return
        self.engine.trace.record("kv_complete", request=rid,
                                 vtime=t.flag.vtime)
        self._ring.retire(t.imm)
        t.completed.set()
        if self.on_complete is not None:
            self.on_complete(t)

    # ----------------------------------------------------------- cancellation

    def cancel(self, ticket: KvTicket) -> None:
        def run() -> None:
            t = self._tickets.get(ticket.request_id)
            if t is None or t.completed.is_set():
                return
            if t.token.state is CancelState.ACTIVE:
                t.token.request_cancel()
                t.cancel_sent_at = time.monotonic()
                self.engine.trace.record("kv_cancel", request=t.request_id)
                self.engine.submit_send(t.prefiller,
                                        encode_cancel(t.request_id))
        self._proto.post(run)

    def _confirmed(self, rid: int, progress: int) -> None:
        t = self._tickets.get(rid)
        if t is None or t.completed.is_set() \
                or t.token.state is CancelState.CONFIRMED:
            return
        if t.token.state is CancelState.ACTIVE:
            t.token.request_cancel()
        t.token.confirm()
        self.engine.trace.record("kv_cancel_confirmed", request=rid,
                                 progress=progress)
        # all receipts drained on the prefiller side, counters can go
        self.engine.imm_table.cancel(t.imm)
        self._ring.retire(t.imm)
        self.release(t)

    def _monitor_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_s / 2):
            now = time.monotonic()
            limit = self.misses * self.heartbeat_s
            with self._lock:
                tickets = list(self._tickets.values())
            for t in tickets:
                if t.completed.is_set():
                    continue
                if t.token.state is CancelState.ACTIVE:
                    if now - t.last_heartbeat > limit:
                        self.engine.trace.record("kv_timeout",
                                                 request=t.request_id)
                        self._proto.post(
                            lambda t=t: self._timeout_cancel(t))
                elif t.token.state is CancelState.CANCEL_REQUESTED:
                    sent = t.cancel_sent_at or now
                    if (now - sent > limit
                            and t.last_heartbeat <= sent):
                        self._proto.post(
                            lambda t=t: self._give_up(t))

    def _timeout_cancel(self, t: KvTicket) -> None:
        if t.completed.is_set() or t.token.state is not CancelState.ACTIVE:
            return
        t.token.request_cancel()
        t.cancel_sent_at = time.monotonic()
        self.engine.submit_send(t.prefiller, encode_cancel(t.request_id))

    def _give_up(self, t: KvTicket) -> None:
        """Peer unreachable past the timeout: reclaim without confirmation."""
        if t.token.state is not CancelState.CANCEL_REQUESTED:
            return
        t.token.confirm()
        self.engine.trace.record("kv_cancel_expired", request=t.request_id)
        self.engine.imm_table.cancel(t.imm)
        self._ring.retire(t.imm)
        self.release(t)

    # -------------------------------------------------------------- pool mgmt

    def release(self, ticket: KvTicket) -> None:
        with self._lock:
            if ticket.released:
                return
            ticket.released = True
            self._tickets.pop(ticket.request_id, None)
            self._free.extend(ticket.slots)
        if ticket.own_ctx:
            try:
                self.engine.dereg_mr(ticket.ctx_handle)
            except Exception:
                pass

    def page_view(self, ticket: KvTicket, layer: int, head: int,
                  i: int) -> np.ndarray:
        """The decoder-side bytes of the i-th page of a request."""
        B = self.layout.page_len
        idx = self.layout.page_index(self.local_heads, self.pool_slots,
                                     layer, head, ticket.slots[i])
        return self.kv[idx * B:(idx + 1) * B]

    def close(self) -> None:
        self._stop.set()
        self._monitor.join(timeout=2.0)
        self._proto.close()
