"""The transfer engine: API-to-WR translation, multi-rail sharding,
immediate-value counting, watcher polling and callback dispatch.

One engine owns one domain group (1-4 rails serving one device), one worker
thread that posts WRs and polls completions, one callback thread that runs
user callbacks, and optionally one watcher-poller thread.  The public API is
callable from any thread; calls enqueue commands to the worker.

The engine promises NO ordering between any two operations.  The only
cross-peer synchronization primitive is the immediate counter: an operation
submitted with an imm value increments the destination's counter for that
value exactly once, and only after the operation's full payload is visible
in destination memory.  For operations that translate to several WRs this is
enforced with a trailing zero-length fence write carrying the imm, posted
only after every payload WR has completed: with unordered delivery, an imm
on any payload WR could overtake its siblings, while the fence cannot.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .errors import ProtocolError, RegionError, TransferError
from .trace import TraceRecorder
from .transport.base import (FaultConfig, ImmReceived, MsgReceived, Rail,
                             SendDone)
from .transport.sim import SimFabric
from .wire import MrDesc, MrHandle, NetAddr, Pages, ScatterDst

logger = logging.getLogger(__name__)

SPLIT_THRESHOLD = 1 << 20
MAX_RAILS = 4

_FENCE_IDX = (1 << 24) - 1
_MAX_WRS_PER_OP = _FENCE_IDX

_WATCH_HOT_S = 1e-3
_WATCH_BACKOFF_S = 5e-6


class CompletionFlag:
    """Cross-thread completion indicator for one submitted operation."""

    __slots__ = ("_ev", "ok", "error", "vtime")

    def __init__(self) -> None:
        self._ev = threading.Event()
        self.ok: bool | None = None
        self.error: str | None = None
        self.vtime = 0.0

    def _finish(self, ok: bool, vtime: float, error: str | None = None) -> None:
        self.ok = ok
        self.error = error
        self.vtime = vtime
        self._ev.set()

    def done(self) -> bool:
        return self._ev.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._ev.wait(timeout)

    def result(self, timeout: float | None = None) -> float:
        """Wait; return the completion virtual time or raise on error/timeout."""
        if not self._ev.wait(timeout):
            raise TransferError("timed out waiting for completion")
        if not self.ok:
            raise TransferError(self.error or "operation failed")
        return self.vtime


class ImmFlag:
    """Fires when an armed immediate count is reached."""

    __slots__ = ("_ev", "imm", "vtime")

    def __init__(self, imm: int) -> None:
        self._ev = threading.Event()
        self.imm = imm
        self.vtime = 0.0

    def _fire(self, vtime: float) -> None:
        self.vtime = vtime
        self._ev.set()

    def done(self) -> bool:
        return self._ev.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._ev.wait(timeout)

    def result(self, timeout: float | None = None) -> float:
        if not self._ev.wait(timeout):
            raise TransferError(f"timed out waiting for imm {self.imm}")
        return self.vtime


class Watcher:
    """Shared word the application side bumps to trigger engine callbacks.

    Not every intermediate value is observed; the callback sees a strictly
    increasing subsequence ending at the latest written value.
    """

    __slots__ = ("value", "last_seen", "cb")

    def __init__(self, cb: Callable[[int, int], None], initial: int = 0) -> None:
        self.value = initial
        self.last_seen = initial
        self.cb = cb

    def store(self, v: int) -> None:
        self.value = v


class _ImmEntry:
    __slots__ = ("total", "consumed", "maxv", "armed")

    def __init__(self) -> None:
        self.total = 0
        self.consumed = 0
        self.maxv = 0.0
        self.armed: tuple[int, ImmFlag, Callable[[ImmFlag], None] | None] | None = None

    @property
    def available(self) -> int:
        return self.total - self.consumed


class ImmCounterTable:
    """Per-imm-value receipt counters with one-shot threshold expectations.

    Receipts are retired when an expectation fires, so the same imm value can
    be re-armed round after round.  Arming an imm that is already armed is an
    error; the total receipt count is monotonically non-decreasing.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[int, _ImmEntry] = {}

    def _entry(self, imm: int) -> _ImmEntry:
        e = self._entries.get(imm)
        if e is None:
            e = self._entries[imm] = _ImmEntry()
        return e

    def arm(self, imm: int, count: int,
            flag: ImmFlag, cb: Callable[[ImmFlag], None] | None,
            ) -> tuple[ImmFlag, Callable[[ImmFlag], None] | None] | None:
        """Arm a threshold; returns a (flag, cb) pair to fire if already met."""
        if count < 0:
            raise ProtocolError("negative imm count")
        with self._lock:
            e = self._entry(imm)
            if e.armed is not None:
                raise ProtocolError(f"imm {imm} already armed")
            if e.available >= count:
                e.consumed += count
                flag._fire(e.maxv)
                return flag, cb
            e.armed = (count, flag, cb)
            return None

    def increment(self, imm: int, vtime: float,
                  ) -> tuple[ImmFlag, Callable[[ImmFlag], None] | None] | None:
        with self._lock:
            e = self._entry(imm)
            e.total += 1
            if vtime > e.maxv:
                e.maxv = vtime
            if e.armed is not None and e.available >= e.armed[0]:
                count, flag, cb = e.armed
                e.armed = None
                e.consumed += count
                flag._fire(e.maxv)
                return flag, cb
            return None

    def cancel(self, imm: int) -> None:
        """Drop the armed expectation and all counts for an imm value.

        Only safe once the caller knows no further receipts for this value
        are in flight; otherwise a stray receipt would poison a later re-arm.
        """
        with self._lock:
            self._entries.pop(imm, None)

    def received_total(self, imm: int) -> int:
        with self._lock:
            e = self._entries.get(imm)
            return e.total if e else 0

    def pending(self, imm: int) -> int:
        with self._lock:
            e = self._entries.get(imm)
            return e.available if e else 0


@dataclass
class _PostSpec:
    rail: int
    dst: NetAddr
    rkey: int
    dst_offset: int
    payload: Any
    imm: int | None
    wr_index: int
    not_before: float | None = None


@dataclass
class _Op:
    op_id: int
    kind: str
    flag: CompletionFlag
    cb: Callable[[CompletionFlag], None] | None
    remaining: int
    not_before: float
    end_vtime: float = 0.0
    error: str | None = None
    imm: int | None = None
    fence: tuple[int, NetAddr, int, int] | None = None  # rail, addr, rkey, offset
    fence_posted: bool = False


@dataclass
class _Region:
    handle: MrHandle
    desc: MrDesc
    view: memoryview
    ident: int


@dataclass
class _MsgSpec:
    dst: NetAddr
    payload: bytes


class DomainGroup:
    """Rails of one device plus the worker-owned submission state."""

    def __init__(self, device: int, rails: list[Rail], cmd_limit: int) -> None:
        self.device = device
        self.rails = rails
        self.pending: dict[int, _Op] = {}
        self.cmdq: queue.Queue[tuple[str, Any]] = queue.Queue(maxsize=cmd_limit)
        self.retry: list[tuple[_Op, _PostSpec]] = []


class TransferEngine:
    def __init__(self, fabric: SimFabric | Any, *, rails: int = 1,
                 engine_id: int | None = None, device: int = 0,
                 name: str | None = None, cmd_limit: int = 4096,
                 loop_trace: bool = False) -> None:
        if not 1 <= rails <= MAX_RAILS:
            raise TransferError(f"rail count {rails} outside 1..{MAX_RAILS}")
        self.engine_id = engine_id if engine_id is not None else fabric.allocate_engine_id()
        self.name = name if name is not None else f"e{self.engine_id}"
        self.trace = TraceRecorder(self.name)
        self.fabric = fabric
        self.config: FaultConfig = fabric.config
        rail_objs: list[Rail] = [fabric.create_rail(self.engine_id, r, self.trace)
                                 for r in range(rails)]
        self.group = DomainGroup(device, rail_objs, cmd_limit)
        self.imm_table = ImmCounterTable()
        self._loop_trace = loop_trace

        self._lock = threading.Lock()
        self._regions: dict[int, _Region] = {}
        self._idents: dict[int, int] = {}
        self._next_region = itertools.count(1)
        self._next_rkey = itertools.count(1)
        self._next_base = 1 << 20
        self._next_op = itertools.count(1)
        self._next_rail = 0
        self._peer_groups: dict[int, tuple[NetAddr, ...]] = {}
        self._next_group = itertools.count(1)

        self._recv_cb: Callable[[memoryview, NetAddr], None] | None = None
        self._watchers: list[Watcher] = []
        self._poller: threading.Thread | None = None

        self._wake = threading.Event()
        for r in rail_objs:
            r.on_event = self._wake.set
        self._stop = threading.Event()
        self._cbq: queue.SimpleQueue[Callable[[], None] | None] = queue.SimpleQueue()
        self._cb_thread = threading.Thread(target=self._cb_loop,
                                           name=f"{self.name}-cb", daemon=True)
        self._cb_thread.start()
        self._worker = threading.Thread(target=self._work_loop,
                                        name=f"{self.name}-worker", daemon=True)
        self._worker.start()

    # ---------------------------------------------------------------- regions

    def main_address(self) -> NetAddr:
        return self.group.rails[0].addr

    @property
    def nrails(self) -> int:
        return len(self.group.rails)

    def reg_mr(self, buf: Any, device: int | None = None) -> tuple[MrHandle, MrDesc]:
        if device is not None and device != self.group.device:
            raise RegionError(f"unknown device {device}")
        view = memoryview(buf)
        if view.readonly:
            raise RegionError("region must be writable")
        if not view.contiguous:
            raise RegionError("region must be contiguous")
        view = view.cast("B")
        ident = id(view.obj)
        with self._lock:
            if ident in self._idents:
                raise RegionError("buffer already registered")
            region_id = next(self._next_region)
            base = self._next_base
            self._next_base += (len(view) + 0xFFF) // 0x1000 * 0x1000 + 0x1000
            rkeys = []
            for rail in self.group.rails:
                rkey = next(self._next_rkey)
                rail.register(rkey, view)
                rkeys.append((rail.addr, rkey))
            handle = MrHandle(region_id=region_id, base=base,
                              length=len(view), device=device)
            desc = MrDesc(base=base, length=len(view), rkeys=tuple(rkeys))
            self._regions[region_id] = _Region(handle, desc, view, ident)
            self._idents[ident] = region_id
        self.trace.record("reg_mr", region=region_id, nbytes=len(view))
        return handle, desc

    def dereg_mr(self, handle: MrHandle) -> None:
        with self._lock:
            rec = self._regions.pop(handle.region_id, None)
            if rec is None:
                raise RegionError(f"region {handle.region_id} not registered")
            del self._idents[rec.ident]
            for rail, (_, rkey) in zip(self.group.rails, rec.desc.rkeys):
                rail.deregister(rkey)

    def desc_of(self, handle: MrHandle) -> MrDesc:
        return self._get_region(handle).desc

    def _get_region(self, handle: MrHandle) -> _Region:
        with self._lock:
            rec = self._regions.get(handle.region_id)
        if rec is None:
            raise RegionError(f"region {handle.region_id} not registered")
        return rec

    # ------------------------------------------------------------ submissions

    def _check_desc(self, desc: MrDesc) -> None:
        if desc.nrails != self.nrails:
            raise TransferError(
                f"peer has {desc.nrails} rails, this engine has {self.nrails}; "
                "all engines must use the same rail count")

    def _rotate(self) -> int:
        with self._lock:
            r = self._next_rail
            self._next_rail = (r + 1) % self.nrails
        return r

    def _new_op(self, kind: str, nwrs: int, imm: int | None,
                cb: Callable[[CompletionFlag], None] | None,
                not_before: float, label: str) -> _Op:
        op = _Op(op_id=next(self._next_op), kind=kind, flag=CompletionFlag(),
                 cb=cb, remaining=nwrs, not_before=not_before, imm=imm)
        if label:
            self.trace.label_transfer(op.op_id, label)
        self.trace.record("op_submit", vtime=not_before, transfer=op.op_id,
                          op=kind, wrs=nwrs, imm=imm, label=label or None)
        return op

    def _enqueue(self, kind: str, payload: Any) -> None:
        self.group.cmdq.put((kind, payload))
        self._wake.set()

    def _submit_op(self, op: _Op, posts: list[_PostSpec]) -> CompletionFlag:
        if len(posts) > _MAX_WRS_PER_OP:
            raise TransferError(f"operation would need {len(posts)} WRs")
        self._enqueue("op", (op, posts))
        return op.flag

    def submit_single_write(self, length: int, src: tuple[MrHandle, int],
                            dst: tuple[MrDesc, int], imm: int | None = None,
                            on_done: Callable[[CompletionFlag], None] | None = None,
                            not_before: float = 0.0, label: str = "",
                            ) -> CompletionFlag:
        handle, src_off = src
        desc, dst_off = dst
        rec = self._get_region(handle)
        self._check_desc(desc)
        if length < 0 or src_off < 0 or dst_off < 0:
            raise TransferError("negative length or offset")
        if src_off + length > rec.handle.length:
            raise TransferError(
                f"source range [{src_off},{src_off + length}) outside region "
                f"of {rec.handle.length}")
        if dst_off + length > desc.length:
            raise TransferError(
                f"destination range [{dst_off},{dst_off + length}) outside "
                f"region of {desc.length}")
        if length == 0 and imm is None:
            raise TransferError("zero-length write requires an immediate")
        r0 = self._rotate()
        nr = self.nrails
        posts: list[_PostSpec] = []
        if length > SPLIT_THRESHOLD and nr > 1:
            bounds = [length * k // nr for k in range(nr + 1)]
            for k in range(nr):
                lo, hi = bounds[k], bounds[k + 1]
                rail = (r0 + k) % nr
                addr, rkey = desc.rkeys[rail]
                posts.append(_PostSpec(rail, addr, rkey, dst_off + lo,
                                       rec.view[src_off + lo:src_off + hi],
                                       None, k))
        else:
            addr, rkey = desc.rkeys[r0]
            posts.append(_PostSpec(r0, addr, rkey, dst_off,
                                   rec.view[src_off:src_off + length],
                                   None, 0))
        return self._finish_build("single_write", posts, imm, desc, dst_off,
                                  r0, on_done, not_before, label)

    def submit_paged_writes(self, page_len: int, src: tuple[MrHandle, Pages],
                            dst: tuple[MrDesc, Pages], imm: int | None = None,
                            on_done: Callable[[CompletionFlag], None] | None = None,
                            not_before: float = 0.0, label: str = "",
                            ) -> CompletionFlag:
        handle, src_pages = src
        desc, dst_pages = dst
        rec = self._get_region(handle)
        self._check_desc(desc)
        if len(src_pages.indices) != len(dst_pages.indices):
            raise TransferError(
                f"{len(src_pages.indices)} source pages vs "
                f"{len(dst_pages.indices)} destination pages")
        if page_len <= 0:
            raise TransferError("page length must be positive")
        self._check_pages(src_pages, page_len, rec.handle.length, "source")
        self._check_pages(dst_pages, page_len, desc.length, "destination")
        r0 = self._rotate()
        nr = self.nrails
        posts = []
        for i in range(len(src_pages.indices)):
            rail = (r0 + i) % nr
            addr, rkey = desc.rkeys[rail]
            so = src_pages.page_offset(i)
            posts.append(_PostSpec(rail, addr, rkey, dst_pages.page_offset(i),
                                   rec.view[so:so + page_len], None, i))
        return self._finish_build("paged_writes", posts, imm, desc,
                                  dst_pages.offset, r0, on_done, not_before,
                                  label)

    @staticmethod
    def _check_pages(pages: Pages, page_len: int, region_len: int,
                     side: str) -> None:
        for i in pages.indices:
            if not 0 <= i < (1 << 32):
                raise TransferError(f"{side} page index {i} is not a u32")
        if pages.indices:
            worst = pages.offset + max(pages.indices) * pages.stride + page_len
            if worst > region_len:
                raise TransferError(
                    f"{side} page ends at {worst}, outside region of {region_len}")

    def _finish_build(self, kind: str, posts: list[_PostSpec], imm: int | None,
                      desc: MrDesc, fence_off: int, r0: int,
                      on_done: Callable[[CompletionFlag], None] | None,
                      not_before: float, label: str) -> CompletionFlag:
        if imm is not None and not 0 <= imm < (1 << 32):
            raise TransferError(f"imm {imm} is not a u32")
        if not posts:
            if imm is not None:
                addr, rkey = desc.rkeys[r0]
                posts = [_PostSpec(r0, addr, rkey, fence_off, b"", imm, 0)]
            else:
                op = self._new_op(kind, 0, None, on_done, not_before, label)
                op.flag._finish(True, not_before)
                self.trace.record("op_done", vtime=not_before,
                                  transfer=op.op_id, ok=True)
                if on_done is not None:
                    self._cbq.put(lambda f=op.flag: on_done(f))
                return op.flag
        elif imm is not None:
            if len(posts) == 1:
                posts[0].imm = imm
            else:
                addr, rkey = desc.rkeys[r0]
                op = self._new_op(kind, len(posts), imm, on_done, not_before, label)
                op.fence = (r0, addr, rkey, fence_off)
                self._submit_op(op, posts)
                return op.flag
        op = self._new_op(kind, len(posts), imm, on_done, not_before, label)
        return self._submit_op(op, posts)

    def submit_send(self, addr: NetAddr, msg: bytes,
                    on_done: Callable[[CompletionFlag], None] | None = None,
                    not_before: float = 0.0, label: str = "") -> CompletionFlag:
        op = self._new_op("send", 1, None, on_done, not_before, label)
        self._enqueue("msg", (op, _MsgSpec(addr, bytes(msg))))
        return op.flag

    def submit_recvs(self, length: int, count: int,
                     cb: Callable[[memoryview, NetAddr], None]) -> None:
        if length <= 0 or count <= 0:
            raise TransferError("recv length and count must be positive")
        with self._lock:
            self._recv_cb = cb
        rail = self.group.rails[0]
        for _ in range(count):
            rail.post_recv(bytearray(length))

    def expect_imm_count(self, imm: int, count: int,
                         cb: Callable[[ImmFlag], None] | None = None) -> ImmFlag:
        if not 0 <= imm < (1 << 32):
            raise TransferError(f"imm {imm} is not a u32")
        flag = ImmFlag(imm)
        self.trace.record("imm_arm", imm=imm, count=count)
        fired = self.imm_table.arm(imm, count, flag, cb)
        if fired is not None:
            self._fire_imm(fired)
        return flag

    def _fire_imm(self, fired: tuple[ImmFlag, Callable[[ImmFlag], None] | None],
                  ) -> None:
        flag, cb = fired
        self.trace.record("imm_fire", vtime=flag.vtime, imm=flag.imm)
        if cb is not None:
            self._cbq.put(lambda: cb(flag))

    def add_peer_group(self, addrs: Sequence[NetAddr]) -> int:
        if not addrs:
            raise TransferError("empty peer group")
        with self._lock:
            h = next(self._next_group)
            self._peer_groups[h] = tuple(addrs)
        return h

    def _group_peers(self, handle: int, n: int, what: str) -> tuple[NetAddr, ...]:
        with self._lock:
            peers = self._peer_groups.get(handle)
        if peers is None:
            raise TransferError(f"unknown peer group {handle}")
        if n != len(peers):
            raise TransferError(
                f"{what} carries {n} entries for a group of {len(peers)}")
        return peers

    def submit_scatter(self, group: int, src: MrHandle,
                       dsts: Sequence[ScatterDst], imm: int | None = None,
                       on_done: Callable[[CompletionFlag], None] | None = None,
                       not_before: float = 0.0, label: str = "",
                       ) -> CompletionFlag:
        self._group_peers(group, len(dsts), "scatter")
        rec = self._get_region(src)
        if imm is not None and not 0 <= imm < (1 << 32):
            raise TransferError(f"imm {imm} is not a u32")
        r0 = self._rotate()
        nr = self.nrails
        posts = []
        for i, d in enumerate(dsts):
            self._check_desc(d.desc)
            if d.length < 0 or d.src < 0 or d.offset < 0:
                raise TransferError("negative length or offset in scatter entry")
            if d.src + d.length > rec.handle.length:
                raise TransferError(f"scatter source slice {i} out of bounds")
            if d.offset + d.length > d.desc.length:
                raise TransferError(f"scatter destination slice {i} out of bounds")
            if d.length == 0 and imm is None:
                continue
            rail = (r0 + i) % nr
            addr, rkey = d.desc.rkeys[rail]
            posts.append(_PostSpec(rail, addr, rkey, d.offset,
                                   rec.view[d.src:d.src + d.length], imm, i))
        op = self._new_op("scatter", len(posts), imm, on_done, not_before, label)
        if not posts:
            op.flag._finish(True, not_before)
            self.trace.record("op_done", vtime=not_before, transfer=op.op_id,
                              ok=True)
            if on_done is not None:
                self._cbq.put(lambda f=op.flag: on_done(f))
            return op.flag
        return self._submit_op(op, posts)

    def submit_barrier(self, group: int, imm: int,
                       dsts: Sequence[tuple[MrDesc, int]],
                       on_done: Callable[[CompletionFlag], None] | None = None,
                       not_before: float = 0.0, label: str = "",
                       ) -> CompletionFlag:
        self._group_peers(group, len(dsts), "barrier")
        if not 0 <= imm < (1 << 32):
            raise TransferError(f"imm {imm} is not a u32")
        r0 = self._rotate()
        nr = self.nrails
        posts = []
        for i, (desc, off) in enumerate(dsts):
            self._check_desc(desc)
            if not 0 <= off <= desc.length:
                raise TransferError(f"barrier offset {off} out of bounds")
            rail = (r0 + i) % nr
            addr, rkey = desc.rkeys[rail]
            posts.append(_PostSpec(rail, addr, rkey, off, b"", imm, i))
        op = self._new_op("barrier", len(posts), imm, on_done, not_before,
                          label or "barrier")
        return self._submit_op(op, posts)

    def alloc_watcher(self, cb: Callable[[int, int], None],
                      initial: int = 0) -> Watcher:
        w = Watcher(cb, initial)
        with self._lock:
            self._watchers.append(w)
            if self._poller is None:
                self._poller = threading.Thread(target=self._poll_watchers,
                                                name=f"{self.name}-watch",
                                                daemon=True)
                self._poller.start()
        return w

    def free_watcher(self, w: Watcher) -> None:
        with self._lock:
            try:
                self._watchers.remove(w)
            except ValueError:
                pass

    # ------------------------------------------------------------- the worker

    def _work_loop(self) -> None:
        group = self.group
        it = 0
        while True:
            it += 1
            did = 0
            while True:
                try:
                    kind, payload = group.cmdq.get_nowait()
                except queue.Empty:
                    break
                if kind == "stop":
                    return
                did += 1
                if self._loop_trace:
                    self.trace.record("cmd_exec", it=it, cmd=kind)
                if kind == "op":
                    self._post_op(*payload)
                elif kind == "msg":
                    self._post_msg(*payload)
            if group.retry:
                did += self._retry_posts()
            for rail in group.rails:
                for ev in rail.poll(256):
                    did += 1
                    if self._loop_trace:
                        self.trace.record("ev_exec", it=it,
                                          ev=type(ev).__name__)
                    self._handle_event(ev)
            if did == 0:
                if self._stop.is_set():
                    return
                self._wake.wait(5e-4)
                self._wake.clear()

    def _post_op(self, op: _Op, posts: list[_PostSpec]) -> None:
        self.group.pending[op.op_id] = op
        for spec in posts:
            self._try_post(op, spec)

    def _try_post(self, op: _Op, spec: _PostSpec) -> bool:
        rail = self.group.rails[spec.rail]
        nb = spec.not_before if spec.not_before is not None else op.not_before
        try:
            accepted = rail.post_write(spec.dst, spec.rkey, spec.dst_offset,
                                       spec.payload, spec.imm,
                                       (op.op_id << 24) | spec.wr_index,
                                       nb, op.op_id)
        except TransferError as exc:
            self._wr_done(op, False, nb, str(exc))
            return True
        if not accepted:
            self.group.retry.append((op, spec))
        return accepted

    def _post_msg(self, op: _Op, spec: _MsgSpec) -> None:
        self.group.pending[op.op_id] = op
        rail = self.group.rails[0]
        try:
            accepted = rail.post_msg(spec.dst, spec.payload, op.op_id << 24,
                                     op.not_before, op.op_id)
        except TransferError as exc:
            self._wr_done(op, False, op.not_before, str(exc))
            return
        if not accepted:
            self.group.retry.append(
                (op, _PostSpec(0, spec.dst, -1, 0, spec.payload, None, 0)))

    def _retry_posts(self) -> int:
        todo = self.group.retry
        self.group.retry = []
        n = 0
        for op, spec in todo:
            if spec.rkey < 0:
                rail = self.group.rails[0]
                try:
                    accepted = rail.post_msg(spec.dst, spec.payload,
                                             op.op_id << 24, op.not_before,
                                             op.op_id)
                except TransferError as exc:
                    self._wr_done(op, False, op.not_before, str(exc))
                    continue
                if accepted:
                    n += 1
                else:
                    self.group.retry.append((op, spec))
            elif self._try_post(op, spec):
                n += 1
        return n

    def _handle_event(self, ev: Any) -> None:
        if isinstance(ev, SendDone):
            op = self.group.pending.get(ev.wr_key >> 24)
            if op is None:
                logger.warning("%s: completion for unknown op %d", self.name,
                               ev.wr_key >> 24)
                return
            self._wr_done(op, ev.ok, ev.vtime, ev.error)
        elif isinstance(ev, ImmReceived):
            fired = self.imm_table.increment(ev.imm, ev.vtime)
            if fired is not None:
                self._fire_imm(fired)
        elif isinstance(ev, MsgReceived):
            with self._lock:
                cb = self._recv_cb
            if cb is None:
                logger.warning("%s: dropping message, no recv callback",
                               self.name)
                return
            rail = self.group.rails[0]
            def run(ev: MsgReceived = ev) -> None:
                try:
                    cb(ev.data, ev.src)
                finally:
                    rail.post_recv(ev.buf)
            self._cbq.put(run)

    def _wr_done(self, op: _Op, ok: bool, vtime: float,
                 error: str | None) -> None:
        op.remaining -= 1
        if vtime > op.end_vtime:
            op.end_vtime = vtime
        if not ok and op.error is None:
            op.error = error or "write failed"
        if op.remaining > 0:
            return
        if op.fence is not None and not op.fence_posted and op.error is None:
            op.fence_posted = True
            op.remaining = 1
            rail_idx, addr, rkey, off = op.fence
            spec = _PostSpec(rail_idx, addr, rkey, off, b"", op.imm,
                             _FENCE_IDX, not_before=op.end_vtime)
            self._try_post(op, spec)
            return
        self.group.pending.pop(op.op_id, None)
        op.flag._finish(op.error is None, op.end_vtime, op.error)
        self.trace.record("op_done", vtime=op.end_vtime, transfer=op.op_id,
                          ok=op.error is None, error=op.error)
        if op.cb is not None:
            cb, flag = op.cb, op.flag
            self._cbq.put(lambda: cb(flag))

    # ------------------------------------------------------------ aux threads

    def _cb_loop(self) -> None:
        while True:
            fn = self._cbq.get()
            if fn is None:
                return
            try:
                fn()
            except Exception:
                logger.exception("%s: user callback raised", self.name)

    def _poll_watchers(self) -> None:
        last_change = time.monotonic()
        while not self._stop.is_set():
            changed = False
            with self._lock:
                watchers = list(self._watchers)
            for w in watchers:
                v = w.value
                if v != w.last_seen:
                    old, w.last_seen = w.last_seen, v
                    changed = True
                    cb = w.cb
                    self._cbq.put(lambda cb=cb, old=old, v=v: cb(old, v))
            now = time.monotonic()
            if changed:
                last_change = now
            elif now - last_change > _WATCH_HOT_S:
                time.sleep(_WATCH_BACKOFF_S)

    # ----------------------------------------------------------------- close

    def drain(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not self.group.pending and self.group.cmdq.empty() \
                    and not self.group.retry:
                return
            time.sleep(1e-3)
        raise TransferError(f"{self.name}: drain timed out")

    def close(self, drain: bool = True) -> None:
        if self._stop.is_set():
            return
        if drain:
            try:
                self.drain()
            except TransferError:
                logger.warning("%s: closing with operations still pending",
                               self.name)
        self._stop.set()
        self.group.cmdq.put(("stop", None))
        self._wake.set()
        self._worker.join(timeout=5.0)
        if self._poller is not None:
            self._poller.join(timeout=5.0)
        self._cbq.put(None)
        self._cb_thread.join(timeout=5.0)
        for rail in self.group.rails:
            rail.close()

    def __enter__(self) -> "TransferEngine":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close(drain=exc[0] is None)
