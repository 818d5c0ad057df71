"""Point-to-point weight publication from training ranks to inference ranks.

A controller gathers parameter metadata from both sides once, builds a
static transfer schedule, and every step replays it: each training rank
stages its tasks through a four-lane pipeline (H2D, Prepare, Write,
Barrier) under a temporary-memory watermark, pushing prepared bytes
directly into pre-registered inference regions with one-sided writes.  The
inference side does nothing at all during a step; its engine only absorbs
writes.

Tensors are modeled as host numpy arrays: bf16 words for source weights,
with optional narrowing to fp8 (e4m3, per-tensor scale appended as a
little-endian f32 footer) during the prepare stage.  Schedules serialize
to JSON lines, one task per line, as documented in docs/trace.md.
"""

from __future__ import annotations

import json
import queue
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .engine import CompletionFlag, TransferEngine
from .errors import ScheduleError
from .kernels import bf16_decode, bf16_encode, fp8_dequantize, fp8_quantize
from .wire import MrDesc, MrHandle, decode_mrdesc, encode_mrdesc

DT_BF16 = "bf16"
DT_FP8 = "fp8"
_ESIZE = {DT_BF16: 2, DT_FP8: 1}
_SCALE_BYTES = 4


@dataclass(frozen=True)
class ParamMeta:
    """One parameter as seen by one rank.

    `shape` is the full logical tensor shape; this rank holds shard
    `shard_index` of `shard_count` along `axis`.  Unsharded parameters use
    the default 0-of-1 sharding.
    """

    name: str
    shape: tuple[int, ...]
    dtype: str
    group: int = 0
    axis: int = 0
    shard_index: int = 0
    shard_count: int = 1
    offload: bool = False

    def __post_init__(self) -> None:
        if self.dtype not in _ESIZE:
            raise ScheduleError(f"{self.name}: unknown dtype {self.dtype!r}")
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ScheduleError(f"{self.name}: bad shape {self.shape}")
        if not 0 <= self.axis < len(self.shape):
            raise ScheduleError(f"{self.name}: shard axis {self.axis} "
                                f"outside shape {self.shape}")
        if self.shard_count < 1 or not 0 <= self.shard_index < self.shard_count:
            raise ScheduleError(f"{self.name}: shard {self.shard_index} of "
                                f"{self.shard_count} is invalid")
        if self.shape[self.axis] % self.shard_count:
            raise ScheduleError(
                f"{self.name}: axis {self.axis} of {self.shape[self.axis]} "
                f"does not tile into {self.shard_count} shards")

    @property
    def nelems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def shard_nelems(self) -> int:
        return self.nelems // self.shard_count

    def shard_shape(self) -> tuple[int, ...]:
        s = list(self.shape)
        s[self.axis] //= self.shard_count
        return tuple(s)

    def payload_bytes(self) -> int:
        """Prepared wire bytes for this rank's slice."""
        n = self.shard_nelems * _ESIZE[self.dtype]
        if self.dtype == DT_FP8:
            n += _SCALE_BYTES
        return n


@dataclass(frozen=True)
class Task:
    """One schedule entry: a source rank sends one prepared slice to
    every destination listed, all identical bytes."""

    name: str
    sources: tuple[str, ...]
    src_axes: tuple[int, ...]
    group: int
    src_rank: int
    dtype: str
    full_shape: tuple[int, ...]
    axis: int
    shard_index: int
    shard_count: int
    nbytes: int
    raw_bytes: int
    offload: bool
    dsts: tuple[tuple[int, MrDesc | None, int], ...]

    @property
    def temp_bytes(self) -> int:
        """Peak temporary memory: raw staging plus the prepared buffer."""
        return self.raw_bytes + self.nbytes


@dataclass(frozen=True)
class TransferSchedule:
    tasks: tuple[Task, ...]

    def __post_init__(self) -> None:
        seen: list[int] = []
        for t in self.tasks:
            if seen and t.group != seen[-1] and t.group in seen:
                raise ScheduleError(
                    f"group {t.group} appears in two separate segments")
            if not seen or t.group != seen[-1]:
                seen.append(t.group)

    def per_rank_bytes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t in self.tasks:
            out[t.src_rank] = out.get(t.src_rank, 0) + t.nbytes * len(t.dsts)
        return out

    def for_rank(self, rank: int) -> list[Task]:
        return [t for t in self.tasks if t.src_rank == rank]


# ------------------------------------------------------------------ schedule


def _index_train(train: Mapping[int, Sequence[ParamMeta]],
                 ) -> dict[str, dict[int, tuple[int, ParamMeta]]]:
    by_name: dict[str, dict[int, tuple[int, ParamMeta]]] = {}
    for rank, metas in train.items():
        for m in metas:
            shards = by_name.setdefault(m.name, {})
            if m.shard_index in shards:
                raise ScheduleError(
                    f"{m.name}: shard {m.shard_index} owned by ranks "
                    f"{shards[m.shard_index][0]} and {rank}")
            shards[m.shard_index] = (rank, m)
    for name, shards in by_name.items():
        metas = [m for _, m in shards.values()]
        first = metas[0]
        for m in metas[1:]:
            if (m.shape, m.axis, m.shard_count, m.dtype, m.group) != (
                    first.shape, first.axis, first.shard_count, first.dtype,
                    first.group):
                raise ScheduleError(f"{name}: inconsistent shard metadata")
        if set(shards) != set(range(first.shard_count)):
            raise ScheduleError(
                f"{name}: shards {sorted(shards)} do not tile "
                f"{first.shard_count} ways")
    return by_name


def infer_layout(metas: Sequence[ParamMeta]) -> tuple[int, dict[str, int]]:
    """Byte offsets of each parameter inside one inference rank's region."""
    offs: dict[str, int] = {}
    total = 0
    for m in metas:
        if m.name in offs:
            raise ScheduleError(f"{m.name}: listed twice on one rank")
        offs[m.name] = total
        total += m.payload_bytes()
    return total, offs


def build_schedule(train: Mapping[int, Sequence[ParamMeta]],
                   infer: Mapping[int, Sequence[ParamMeta]], *,
                   rank_descs: Mapping[int, MrDesc] | None = None,
                   fusion: Mapping[str, Sequence[str]] | None = None,
                   ) -> TransferSchedule:
    """Static mapping of who sends which prepared slice where.

    Groups stay contiguous; within a group, larger payloads go first and a
    greedy least-loaded pick among the shard-holding ranks spreads source
    bytes.
    """
    fusion = dict(fusion or {})
    by_name = _index_train(train)
    offsets = {r: infer_layout(ms)[1] for r, ms in infer.items()}

    def constituents(name: str) -> tuple[str, ...]:
        return tuple(fusion.get(name, (name,)))

    def full_shape_of(name: str) -> tuple[int, ...]:
        parts = []
        for src in constituents(name):
            if src not in by_name:
                raise ScheduleError(f"parameter {src} missing from training "
                                    "metadata")
            parts.append(next(iter(by_name[src].values()))[1].shape)
        if len(parts) == 1:
            return parts[0]
        tail = parts[0][1:]
        for p in parts[1:]:
            if p[1:] != tail:
                raise ScheduleError(
                    f"{name}: fused constituents disagree beyond axis 0")
        return (sum(p[0] for p in parts),) + tail

    # one task per distinct prepared slice, destinations merged
    wanted: dict[tuple[str, int, int, int], list[tuple[int, ParamMeta]]] = {}
    for rank, metas in infer.items():
        for m in metas:
            full = full_shape_of(m.name)
            if m.shape != full:
                raise ScheduleError(
                    f"{m.name}: inference shape {m.shape} vs training "
                    f"{full}")
            key = (m.name, m.axis, m.shard_index, m.shard_count)
            wanted.setdefault(key, []).append((rank, m))

    load: dict[int, int] = {r: 0 for r in train}
    entries = []
    for key, dests in wanted.items():
        name = key[0]
        m0 = dests[0][1]
        for _, m in dests[1:]:
            if (m.dtype, m.shape, m.group) != (m0.dtype, m0.shape, m0.group):
                raise ScheduleError(f"{name}: destination ranks disagree on "
                                    "dtype, shape, or group")
        entries.append((key, m0, dests))
    entries.sort(key=lambda e: (e[1].group, -e[1].payload_bytes(), e[0]))

    tasks: list[Task] = []
    for key, m0, dests in entries:
        name, axis, sidx, scount = key
        holders: set[int] | None = None
        raw = 0
        src_axes = []
        offload = False
        for src in constituents(name):
            owner_ranks = {rank for rank, _ in by_name[src].values()}
            holders = owner_ranks if holders is None else holders & owner_ranks
            src_meta = next(iter(by_name[src].values()))[1]
            raw += src_meta.nelems * _ESIZE[src_meta.dtype]
            src_axes.append(src_meta.axis)
            offload = offload or src_meta.offload
        if not holders:
            holders = set()
            for src in constituents(name):
                holders |= {rank for rank, _ in by_name[src].values()}
        owner = min(holders, key=lambda r: (load[r], r))
        nbytes = m0.payload_bytes()
        load[owner] += nbytes * len(dests)
        dsts = []
        for rank, m in dests:
            desc = rank_descs.get(rank) if rank_descs else None
            dsts.append((rank, desc, offsets[rank][m.name]))
        tasks.append(Task(
            name=name, sources=constituents(name), src_axes=tuple(src_axes),
            group=m0.group, src_rank=owner, dtype=m0.dtype,
            full_shape=m0.shape, axis=axis, shard_index=sidx,
            shard_count=scount, nbytes=nbytes, raw_bytes=raw,
            offload=offload, dsts=tuple(sorted(dsts))))
    return TransferSchedule(tuple(tasks))


def dump_schedule(schedule: TransferSchedule, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in schedule.tasks:
            fh.write(json.dumps({
                "name": t.name, "sources": list(t.sources),
                "src_axes": list(t.src_axes), "group": t.group,
                "src": t.src_rank, "dtype": t.dtype,
                "shape": list(t.full_shape), "axis": t.axis,
                "shard": [t.shard_index, t.shard_count],
                "nbytes": t.nbytes, "raw_bytes": t.raw_bytes,
                "offload": t.offload,
                "dsts": [[r, encode_mrdesc(d).hex() if d else None, off]
                         for r, d, off in t.dsts]}) + "\n")


def load_schedule(path: str) -> TransferSchedule:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            o = json.loads(line)
            tasks.append(Task(
                name=o["name"], sources=tuple(o["sources"]),
                src_axes=tuple(o["src_axes"]), group=o["group"],
                src_rank=o["src"], dtype=o["dtype"],
                full_shape=tuple(o["shape"]), axis=o["axis"],
                shard_index=o["shard"][0], shard_count=o["shard"][1],
                nbytes=o["nbytes"], raw_bytes=o["raw_bytes"],
                offload=o["offload"],
                dsts=tuple((r, decode_mrdesc(bytes.fromhex(d)) if d else None,
                            off) for r, d, off in o["dsts"])))
    return TransferSchedule(tuple(tasks))


# ----------------------------------------------------------------- shard data


class ShardStore:
    """Host-side weights: bf16 word arrays keyed by (name, shard index)."""

    def __init__(self) -> None:
        self._data: dict[tuple[str, int], np.ndarray] = {}

    def put(self, name: str, index: int, words: np.ndarray) -> None:
        if words.dtype != np.uint16:
            raise ScheduleError(f"{name}: shard data must be bf16 words")
        self._data[(name, index)] = words

    def get(self, name: str, index: int) -> np.ndarray:
        try:
            return self._data[(name, index)]
        except KeyError:
            raise ScheduleError(f"missing shard {index} of {name}") from None

    def assemble(self, name: str, axis: int, count: int) -> np.ndarray:
        if count == 1:
            return self.get(name, 0)
        return np.concatenate([self.get(name, i) for i in range(count)],
                              axis=axis)


def random_weights(name: str, shape: tuple[int, ...],
                   seed: int = 0) -> np.ndarray:
    """Deterministic bf16 words for a named tensor; stable across processes."""
    seq = np.random.SeedSequence([seed & 0xFFFFFFFF,
                                  zlib.crc32(name.encode())])
    x = np.random.default_rng(seq).standard_normal(shape, dtype=np.float32)
    return bf16_encode(x).reshape(shape)


def fill_store(train: Mapping[int, Sequence[ParamMeta]],
               seed: int = 0) -> ShardStore:
    store = ShardStore()
    for metas in train.values():
        for m in metas:
            full = random_weights(m.name, m.shape, seed)
            lo = m.shard_index * (m.shape[m.axis] // m.shard_count)
            hi = lo + m.shape[m.axis] // m.shard_count
            sl = [slice(None)] * len(m.shape)
            sl[m.axis] = slice(lo, hi)
            store.put(m.name, m.shard_index, np.ascontiguousarray(full[tuple(sl)]))
    return store


# -------------------------------------------------------------------- prepare


def prepare(task: Task, store: ShardStore) -> bytes:
    """Assemble, fuse, slice, and narrow one task's payload."""
    parts = [_assemble_known(store, src, axis)
             for src, axis in zip(task.sources, task.src_axes)]
    full = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    if full.shape != task.full_shape:
        raise ScheduleError(
            f"{task.name}: assembled {full.shape}, expected {task.full_shape}")
    width = task.full_shape[task.axis] // task.shard_count
    lo = task.shard_index * width
    sl = [slice(None)] * len(task.full_shape)
    sl[task.axis] = slice(lo, lo + width)
    words = np.ascontiguousarray(full[tuple(sl)]).reshape(-1)
    if task.dtype == DT_BF16:
        return words.tobytes()
    x = bf16_decode(words)
    payload, scale = fp8_quantize(x)
    return payload.tobytes() + struct.pack("<f", scale)


def _assemble_known(store: ShardStore, name: str, axis: int) -> np.ndarray:
    """Concatenate every stored shard of one parameter in index order."""
    shards = []
    i = 0
    while True:
        try:
            shards.append(store.get(name, i))
        except ScheduleError:
            break
        i += 1
    if not shards:
        raise ScheduleError(f"missing shard 0 of {name}")
    if len(shards) == 1:
        return shards[0]
    return np.concatenate(shards, axis=axis)


def unpack_payload(buf: bytes, dtype: str) -> np.ndarray:
    """Reverse of prepare for verification: payload bytes to float32."""
    if dtype == DT_BF16:
        return bf16_decode(np.frombuffer(buf, dtype=np.uint16))
    scale = struct.unpack("<f", buf[-_SCALE_BYTES:])[0]
    return fp8_dequantize(np.frombuffer(buf[:-_SCALE_BYTES], dtype=np.uint8),
                          scale)


# ------------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class StageTimes:
    """Simulated per-stage latencies; zero means as fast as possible."""

    h2d_s: float = 0.0
    prepare_s: float = 0.0
    write_s: float = 0.0
    barrier_s: float = 0.0


@dataclass
class StepReport:
    wall_s: float
    bytes_by_rank: dict[int, int]
    tasks_by_rank: dict[int, int]
    peak_temp_by_rank: dict[int, int]

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_rank.values())

    def to_json(self) -> str:
        return json.dumps({
            "wall_s": self.wall_s,
            "bytes_by_rank": {str(k): v for k, v in
                              sorted(self.bytes_by_rank.items())},
            "tasks_by_rank": {str(k): v for k, v in
                              sorted(self.tasks_by_rank.items())},
            "peak_temp_by_rank": {str(k): v for k, v in
                                  sorted(self.peak_temp_by_rank.items())},
            "total_bytes": self.total_bytes})


class _Wip:
    __slots__ = ("task", "raw", "payload", "handle", "flags")

    def __init__(self, task: Task) -> None:
        self.task = task
        self.raw: list[np.ndarray] = []
        self.payload: np.ndarray | None = None
        self.handle: MrHandle | None = None
        self.flags: list[CompletionFlag] = []


class RankExecutor:
    """Four-lane pipeline for one training rank's slice of the schedule.

    Admission happens in schedule order and blocks while admitted tasks
    hold more temporary bytes than the watermark allows; the Barrier lane
    releases them.  Lanes hand tasks over through queues, so up to four
    tasks make progress at once.
    """

    def __init__(self, rank: int, engine: TransferEngine, tasks: Sequence[Task],
                 store: ShardStore, watermark: int,
                 times: StageTimes = StageTimes()) -> None:
        self.rank = rank
        self.engine = engine
        self.tasks = list(tasks)
        self.store = store
        self.watermark = watermark
        self.times = times
        self.inflight = 0
        self.peak = 0
        self._cv = threading.Condition()
        # q[0] feeds H2D, q[1] Prepare, q[2] Write, q[3] Barrier
        self._q: list[queue.SimpleQueue] = [queue.SimpleQueue()
                                            for _ in range(4)]
        self._error: Exception | None = None

    def run(self) -> None:
        for t in self.tasks:
            if t.temp_bytes > self.watermark:
                raise ScheduleError(
                    f"task {t.name} needs {t.temp_bytes} temp bytes, over "
                    f"the {self.watermark} watermark")
        lanes = [threading.Thread(target=fn, name=f"wt{self.rank}-{nm}",
                                  daemon=True)
                 for nm, fn in (("h2d", self._lane_h2d),
                                ("prep", self._lane_prepare),
                                ("write", self._lane_write),
                                ("barrier", self._lane_barrier))]
        for th in lanes:
            th.start()
        for t in self.tasks:
            with self._cv:
                self._cv.wait_for(
                    lambda: self.inflight + t.temp_bytes <= self.watermark
                    or self._error is not None)
                if self._error is not None:
                    break
                self.inflight += t.temp_bytes
                self.peak = max(self.peak, self.inflight)
                self.engine.trace.record("wt_admit", task=t.name,
                                         rank=self.rank,
                                         inflight=self.inflight)
            self._q[0].put(_Wip(t))
        self._q[0].put(None)
        for th in lanes:
            th.join()
        if self._error is not None:
            raise self._error

    def _forward(self, i: int, wip) -> None:
        self._q[i + 1].put(wip)

    def _fail(self, exc: Exception) -> None:
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def _lane_h2d(self) -> None:
        while True:
            wip = self._q[0].get()
            if wip is None:
                self._q[1].put(None)
                return
            try:
                t = wip.task
                for src in t.sources:
                    i = 0
                    while True:
                        try:
                            shard = self.store.get(src, i)
                        except ScheduleError:
                            break
                        wip.raw.append(shard.copy())
                        i += 1
                if self.times.h2d_s:
                    time.sleep(self.times.h2d_s)
                self._forward(0, wip)
            except Exception as exc:
                self._fail(exc)

    def _lane_prepare(self) -> None:
        while True:
            wip = self._q[1].get()
            if wip is None:
                self._q[2].put(None)
                return
            try:
                if self.times.prepare_s:
                    time.sleep(self.times.prepare_s)
                buf = prepare(wip.task, self.store)
                wip.payload = np.frombuffer(bytearray(buf), dtype=np.uint8)
                wip.handle, _ = self.engine.reg_mr(wip.payload)
                self._forward(1, wip)
            except Exception as exc:
                self._fail(exc)

    def _lane_write(self) -> None:
        while True:
            wip = self._q[2].get()
            if wip is None:
                self._q[3].put(None)
                return
            try:
                if self.times.write_s:
                    time.sleep(self.times.write_s)
                t = wip.task
                for rank, desc, off in t.dsts:
                    if desc is None:
                        raise ScheduleError(
                            f"task {t.name} has no destination descriptor "
                            f"for rank {rank}")
                    wip.flags.append(self.engine.submit_single_write(
                        t.nbytes, (wip.handle, 0), (desc, off),
                        label=f"wt.{t.name}.r{rank}"))
                self._forward(2, wip)
            except Exception as exc:
                self._fail(exc)

    def _lane_barrier(self) -> None:
        while True:
            wip = self._q[3].get()
            if wip is None:
                return
            try:
                if self.times.barrier_s:
                    time.sleep(self.times.barrier_s)
                for f in wip.flags:
                    f.result(60.0)
                self.engine.dereg_mr(wip.handle)
                with self._cv:
                    self.inflight -= wip.task.temp_bytes
                    self.engine.trace.record("wt_task_done",
                                             task=wip.task.name,
                                             rank=self.rank,
                                             inflight=self.inflight)
                    self._cv.notify_all()
            except Exception as exc:
                self._fail(exc)


def run_step(engines: Mapping[int, TransferEngine],
             schedule: TransferSchedule, store: ShardStore, *,
             watermark: int, times: StageTimes = StageTimes(),
             final_barrier: Callable[[], None] | None = None) -> StepReport:
    """Execute one weight-publication step across local training ranks.

    `engines` maps training rank to its engine; every task of the schedule
    whose source is a local rank runs here.  The optional `final_barrier`
    runs once after all local tasks finish (multi-process launchers pass a
    socket barrier; single-process callers may pass None).
    """
    execs = {r: RankExecutor(r, eng, schedule.for_rank(r), store, watermark,
                             times)
             for r, eng in engines.items()}
    errors: list[Exception] = []
    t0 = time.monotonic()

    def run_one(ex: RankExecutor) -> None:
        try:
            ex.run()
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=run_one, args=(ex,),
                                name=f"wtrank{r}", daemon=True)
               for r, ex in execs.items()]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    if final_barrier is not None:
        final_barrier()
    wall = time.monotonic() - t0
    for r, ex in execs.items():
        ex.engine.trace.record("wt_step_done", rank=r, wall_s=wall)
    return StepReport(
        wall_s=wall,
        bytes_by_rank={r: sum(t.nbytes * len(t.dsts) for t in ex.tasks)
                       for r, ex in execs.items()},
        tasks_by_rank={r: len(ex.tasks) for r, ex in execs.items()},
        peak_temp_by_rank={r: ex.peak for r, ex in execs.items()})
