"""Expert-parallel token dispatch and combine over one-sided writes.

Every step first exchanges per-expert token counts so all ranks derive an
identical dense receive layout from the same matrix.  Token payloads move
in at most two writes per remote peer: a speculative slice into fixed
per-source private buffers, posted while the counts are still in flight,
and one offset write for the remainder once they have landed.  Expert
outputs return in exactly one write per peer, reusing the dispatch
buffers.  Same-node peers bypass the fabric: payloads are copied directly
and progress is signalled through watcher words, host signal first.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .engine import CompletionFlag, ImmFlag, TransferEngine, Watcher
from .errors import ProtocolError
from .wire import MrDesc, NetAddr, ScatterDst

GROUP_PAD = 8           # expert groups padded to a multiple of this
DEFAULT_PRIVATE = 32    # default private-buffer slots per source rank
_IMM_RING = 1 << 14     # step imm values recycle; one step in flight at a time
_WAIT_SLICE_S = 0.05


# ----------------------------------------------------------- configuration


@dataclass(frozen=True)
class RoutingSpec:
    """Static shape of one expert-parallel deployment.

    `elem_size` 1 carries one quantized byte per hidden element plus f32
    scale slots; 4 carries raw f32 elements (scales unused but reserved).
    """

    ranks: int
    experts: int
    max_tokens: int
    topk: int
    hidden: int = 256
    elem_size: int = 1
    scales: int = 8

    def __post_init__(self) -> None:
        if self.ranks < 1:
            raise ProtocolError("rank count must be positive")
        if self.experts < 1 or self.experts % self.ranks:
            raise ProtocolError(
                f"expert count {self.experts} is not a positive multiple of "
                f"{self.ranks} ranks")
        if not 1 <= self.topk <= self.experts:
            raise ProtocolError(f"topk {self.topk} outside 1..{self.experts}")
        if self.max_tokens < 1:
            raise ProtocolError("max_tokens must be positive")
        if self.hidden < 1:
            raise ProtocolError("hidden size must be positive")
        if self.elem_size not in (1, 4):
            raise ProtocolError(f"element size {self.elem_size} not in (1, 4)")
        if self.scales < 0:
            raise ProtocolError("scale count must be non-negative")
        if self.elem_size == 1 and self.scales < 1:
            raise ProtocolError("quantized payloads need at least one scale slot")

    @property
    def local_experts(self) -> int:
        return self.experts // self.ranks

    @property
    def payload_bytes(self) -> int:
        return self.hidden * self.elem_size + 4 * self.scales

    @property
    def capacity(self) -> int:
        """Receive-slot upper bound per rank, valid for any admissible matrix."""
        return self.ranks * self.max_tokens * max(self.topk, self.local_experts)

    def owner(self, expert: int) -> int:
        return expert // self.local_experts

    def local_index(self, expert: int) -> int:
        return expert % self.local_experts


@dataclass(frozen=True)
class PrivateBufferConfig:
    """Per-source speculative receive slots; 0 disables the eager round."""

    tokens: int = DEFAULT_PRIVATE

    def validate(self, spec: RoutingSpec) -> None:
        if not 0 <= self.tokens <= spec.max_tokens:
            raise ProtocolError(
                f"private buffer of {self.tokens} tokens outside "
                f"0..{spec.max_tokens}")


@dataclass(frozen=True)
class RouteMatrix:
    """Per-source-rank, per-expert token copy counts for one step."""

    spec: RoutingSpec
    counts: np.ndarray

    def __post_init__(self) -> None:
        spec = self.spec
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (spec.ranks, spec.experts):
            raise ProtocolError(
                f"count matrix shape {c.shape} != "
                f"({spec.ranks}, {spec.experts})")
        if (c < 0).any():
            raise ProtocolError("negative route count")
        limit = spec.max_tokens * spec.topk
        for s in range(spec.ranks):
            total = int(c[s].sum())
            if total > limit:
                raise ProtocolError(
                    f"source {s} routes {total} copies, limit {limit}")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_routes(cls, spec: RoutingSpec,
                    routes_by_rank: Sequence[np.ndarray]) -> "RouteMatrix":
        if len(routes_by_rank) != spec.ranks:
            raise ProtocolError("one route array per rank required")
        counts = np.zeros((spec.ranks, spec.experts), dtype=np.int64)
        for s, routes in enumerate(routes_by_rank):
            r = _check_routes(spec, routes)
            if r.size:
                counts[s] = np.bincount(r.ravel(), minlength=spec.experts)
        return cls(spec, counts)


def _check_routes(spec: RoutingSpec, routes: np.ndarray) -> np.ndarray:
    r = np.asarray(routes, dtype=np.int64)
    if r.ndim != 2 or r.shape[1] != spec.topk:
        raise ProtocolError(f"route array shape {r.shape} is not "
                            f"(tokens, {spec.topk})")
    if r.shape[0] > spec.max_tokens:
        raise ProtocolError(
            f"{r.shape[0]} tokens exceed the {spec.max_tokens}-token limit")
    if r.size and (r.min() < 0 or r.max() >= spec.experts):
        raise ProtocolError("expert index out of range")
    for t in range(r.shape[0]):
        if len(set(r[t].tolist())) != spec.topk:
            raise ProtocolError(f"token {t} routes to a duplicate expert")
    return r


# ------------------------------------------------------------------ layout


@dataclass(frozen=True, eq=False)
class DispatchLayout:
    """Dense receive-buffer ranges derived from one route matrix.

    Each destination holds one contiguous slab per source rank, ordered by
    source; inside a slab, copies are grouped by local expert ascending
    with source-token order preserved.  The same function of the same
    matrix runs on every rank, so layouts agree without negotiation.
    """

    spec: RoutingSpec
    counts: np.ndarray        # [ranks, experts]
    assigned: np.ndarray      # [src, dst] copies routed src -> dst
    recv_start: np.ndarray    # [dst, src] slab start slot at dst
    recv_total: np.ndarray    # [dst] occupied receive slots
    send_start: np.ndarray    # [src, dst] slab start slot in src's send buffer

    def range_of(self, dst: int, local_expert: int, src: int) -> tuple[int, int]:
        """Start slot and length of (src, local_expert) inside dst's buffer."""
        base = dst * self.spec.local_experts
        e = base + local_expert
        start = int(self.recv_start[dst, src]
                    + self.counts[src, base:e].sum())
        return start, int(self.counts[src, e])

    def ranges(self, dst: int) -> list[tuple[tuple[int, int], int, int]]:
        """((local_expert, src), start, length) in grouped-output order."""
        out = []
        for le in range(self.spec.local_experts):
            for s in range(self.spec.ranks):
                start, length = self.range_of(dst, le, s)
                out.append(((le, s), start, length))
        return out

    def private_take(self, private_tokens: int) -> np.ndarray:
        """[src, dst] copies that travel in the speculative round."""
        return np.minimum(self.assigned, private_tokens)


def compute_layout(spec: RoutingSpec,
                   counts: np.ndarray | RouteMatrix) -> DispatchLayout:
    matrix = counts if isinstance(counts, RouteMatrix) else RouteMatrix(spec, counts)
    c = matrix.counts
    per_dst = c.reshape(spec.ranks, spec.ranks, spec.local_experts).sum(axis=2)
    assigned = per_dst                       # [src, dst]
    recv_start = np.zeros((spec.ranks, spec.ranks), dtype=np.int64)
    recv_total = np.zeros(spec.ranks, dtype=np.int64)
    for d in range(spec.ranks):
        off = 0
        for s in range(spec.ranks):
            recv_start[d, s] = off
            off += int(assigned[s, d])
        recv_total[d] = off
        if off > spec.capacity:
            raise ProtocolError(
                f"destination {d} needs {off} slots, capacity {spec.capacity}")
    send_start = np.zeros((spec.ranks, spec.ranks), dtype=np.int64)
    for s in range(spec.ranks):
        off = 0
        for d in range(spec.ranks):
            send_start[s, d] = off
            off += int(assigned[s, d])
    return DispatchLayout(spec=spec, counts=c, assigned=assigned,
                          recv_start=recv_start, recv_total=recv_total,
                          send_start=send_start)


# ----------------------------------------------------------- token payloads


def encode_tokens(spec: RoutingSpec, values: np.ndarray) -> np.ndarray:
    """Pack [n, hidden] f32 rows into [n, payload_bytes] wire payloads."""
    v = np.ascontiguousarray(values, dtype=np.float32)
    if v.ndim != 2 or v.shape[1] != spec.hidden:
        raise ProtocolError(f"value shape {v.shape} is not (n, {spec.hidden})")
    n = v.shape[0]
    out = np.zeros((n, spec.payload_bytes), dtype=np.uint8)
    if spec.elem_size == 4:
        out[:, :spec.hidden * 4] = v.view(np.uint8).reshape(n, spec.hidden * 4)
        return out
    for t in range(n):
        q, scale = kernels.fp8_quantize(v[t])
        out[t, :spec.hidden] = q
        out[t, spec.hidden:spec.hidden + 4] = np.frombuffer(
            np.float32(scale).tobytes(), np.uint8)
    return out


def decode_tokens(spec: RoutingSpec, payload: np.ndarray) -> np.ndarray:
    """Recover [n, hidden] f32 rows from wire payloads."""
    p = np.ascontiguousarray(payload, dtype=np.uint8)
    if p.ndim != 2 or p.shape[1] != spec.payload_bytes:
        raise ProtocolError(
            f"payload shape {p.shape} is not (n, {spec.payload_bytes})")
    n = p.shape[0]
    if spec.elem_size == 4:
        return p[:, :spec.hidden * 4].copy().view(np.float32).reshape(n, spec.hidden)
    out = np.empty((n, spec.hidden), dtype=np.float32)
    for t in range(n):
        scale = float(p[t, spec.hidden:spec.hidden + 4].copy().view(np.float32)[0])
        out[t] = kernels.fp8_dequantize(p[t, :spec.hidden], scale)
    return out


# ----------------------------------------------------------------- results


@dataclass
class GroupedTokens:
    """Receive-side tokens regrouped per local expert for expert compute.

    `rows` maps each padded row back to its receive-buffer slot (-1 for
    padding); it is retained by the rank and reused to place expert
    outputs for the combine phase.
    """

    data: np.ndarray          # [padded_total, payload_bytes] u8
    group_sizes: np.ndarray   # [local_experts] unpadded token counts
    group_starts: np.ndarray  # [local_experts] row offsets into data
    rows: np.ndarray          # [padded_total] receive slot or -1
    sources: np.ndarray       # [padded_total] source rank or -1

    def group(self, local_expert: int) -> np.ndarray:
        s = int(self.group_starts[local_expert])
        return self.data[s:s + int(self.group_sizes[local_expert])]


@dataclass(frozen=True)
class StepStats:
    """Virtual-time spans of one dispatch/combine round."""

    step: int
    start_vtime: float
    dispatch_vtime: float
    combine_vtime: float

    @property
    def dispatch_us(self) -> float:
        return self.dispatch_vtime - self.start_vtime

    @property
    def combine_us(self) -> float:
        return self.combine_vtime - self.dispatch_vtime

    @property
    def total_us(self) -> float:
        return self.combine_vtime - self.start_vtime


# ------------------------------------------------------------- rank object


@dataclass
class _Peer:
    rank: int
    node: int
    addr: NetAddr
    route_desc: MrDesc
    recv_desc: MrDesc
    priv_desc: MrDesc
    send_desc: MrDesc
    obj: "MoeRank | None"     # shared-memory lane for same-node peers

    @property
    def intra(self) -> bool:
        return self.obj is not None


class _Step:
    """Mutable state of the single in-flight step."""

    __slots__ = ("step", "imms", "n", "t0", "routes", "pos", "send_rows",
                 "route_flag", "token_flag", "dbar_flag", "comb_flag",
                 "layout", "routes_done", "sends_left", "send_vmax",
                 "barrier_flag", "grouped", "disp_vtime", "sent_first",
                 "layout_ready", "barrier_posted")

    def __init__(self, step: int, n: int, t0: float) -> None:
        self.step = step
        base = (step % _IMM_RING) * 4
        self.imms = (base, base + 1, base + 2, base + 3)
        self.n = n
        self.t0 = t0
        self.routes: np.ndarray | None = None
        self.pos: np.ndarray | None = None
        self.send_rows = 0
        self.route_flag: ImmFlag | None = None
        self.token_flag: ImmFlag | None = None
        self.dbar_flag: ImmFlag | None = None
        self.comb_flag: ImmFlag | None = None
        self.layout: DispatchLayout | None = None
        self.routes_done = threading.Event()
        self.sends_left = 0
        self.send_vmax = t0
        self.barrier_flag: CompletionFlag | None = None
        self.grouped: GroupedTokens | None = None
        self.disp_vtime = 0.0
        # Both flip on the engine callback thread; whichever event lands
        # second posts the remainder, so per-step fabric posting order is
        # stable regardless of how peer route rows race the host signal.
        self.sent_first = False
        self.layout_ready = False
        self.barrier_posted = threading.Event()


class MoeRank:
    """One rank's send/receive half of the dispatch/combine protocol.

    Drive it with dispatch_send -> dispatch_recv -> combine_send ->
    combine_recv; one step may be in flight at a time.  All remote
    completion is counted through immediates; same-node progress moves
    through watcher words only.
    """

    def __init__(self, rank: int, engine: TransferEngine, spec: RoutingSpec,
                 private: PrivateBufferConfig, node: int) -> None:
        private.validate(spec)
        self.rank = rank
        self.engine = engine
        self.spec = spec
        self.node = node
        self.private_tokens = private.tokens
        payload = spec.payload_bytes
        self._route_buf = np.zeros(spec.ranks * spec.experts * 4, np.uint8)
        self._route_np = self._route_buf.view("<u4").reshape(spec.ranks,
                                                             spec.experts)
        self._recv_buf = np.zeros(spec.capacity * payload, np.uint8)
        self._recv_np = self._recv_buf.reshape(spec.capacity, payload)
        priv_slots = max(1, spec.ranks * private.tokens)
        self._priv_buf = np.zeros(priv_slots * payload, np.uint8)
        self._priv_np = self._priv_buf.reshape(priv_slots, payload)
        send_slots = max(1, spec.max_tokens * spec.topk)
        self._send_buf = np.zeros(send_slots * payload, np.uint8)
        self._send_np = self._send_buf.reshape(send_slots, payload)
        self._route_h, self.route_desc = engine.reg_mr(self._route_buf)
        self._recv_h, self.recv_desc = engine.reg_mr(self._recv_buf)
        self._priv_h, self.priv_desc = engine.reg_mr(self._priv_buf)
        self._send_h, self.send_desc = engine.reg_mr(self._send_buf)
        self.addr = engine.main_address()
        self._sig = threading.Condition()
        self._cur: _Step | None = None
        self._error: str | None = None
        self._step_no = 0
        self._vnow = 0.0
        self.step_stats: list[StepStats] = []
        self._peers: list[_Peer] = []
        self._intra: list[_Peer] = []
        self._inter: list[_Peer] = []
        self._rank_of_addr: dict[str, int] = {}
        self._all_group: int | None = None
        self._inter_group: int | None = None
        # One watcher word per same-node source and lane; each has a single
        # writer, so values only ever increase.
        self._priv_seen: dict[int, int] = {}
        self._main_seen: dict[int, int] = {}
        self._comb_seen: dict[int, int] = {}
        self._priv_watch: dict[int, Watcher] = {}
        self._main_watch: dict[int, Watcher] = {}
        self._comb_watch: dict[int, Watcher] = {}
        self._host_watch = engine.alloc_watcher(self._on_host_signal)
        self._send_starts = np.zeros(spec.ranks, dtype=np.int64)
        self._assigned_out = np.zeros(spec.ranks, dtype=np.int64)
        self.last_layout: DispatchLayout | None = None
        self._closed = False

    # -------------------------------------------------------------- wiring

    def _connect(self, mesh: Sequence["MoeRank"]) -> None:
        for other in mesh:
            if other.rank == self.rank:
                continue
            intra = other.node == self.node
            self._peers.append(_Peer(
                rank=other.rank, node=other.node, addr=other.addr,
                route_desc=other.route_desc, recv_desc=other.recv_desc,
                priv_desc=other.priv_desc, send_desc=other.send_desc,
                obj=other if intra else None))
        self._peers.sort(key=lambda p: p.rank)
        self._intra = [p for p in self._peers if p.intra]
        self._inter = [p for p in self._peers if not p.intra]
        self._rank_of_addr = {p.addr.data.hex(): p.rank for p in self._peers}
        if self._peers:
            self._all_group = self.engine.add_peer_group(
                [p.addr for p in self._peers])
        if self._inter:
            self._inter_group = self.engine.add_peer_group(
                [p.addr for p in self._inter])
        for p in self._intra:
            self._priv_seen[p.rank] = 0
            self._main_seen[p.rank] = 0
            self._comb_seen[p.rank] = 0
            self._priv_watch[p.rank] = self.engine.alloc_watcher(
                self._make_seen_cb(self._priv_seen, p.rank))
            self._main_watch[p.rank] = self.engine.alloc_watcher(
                self._make_seen_cb(self._main_seen, p.rank))
            self._comb_watch[p.rank] = self.engine.alloc_watcher(
                self._make_seen_cb(self._comb_seen, p.rank))

    def _make_seen_cb(self, seen: dict[int, int],
                      src: int) -> Callable[[int, int], None]:
        def cb(old: int, new: int, seen=seen, src=src) -> None:
            with self._sig:
                if new > seen[src]:
                    seen[src] = new
                self._sig.notify_all()
        return cb

    # ------------------------------------------------------------ dispatch

    def dispatch_send(self, payload: np.ndarray, routes: np.ndarray) -> None:
        """Stage tokens, signal the host, and launch the two-round send."""
        spec = self.spec
        r = _check_routes(spec, routes)
        n = r.shape[0]
        p = np.ascontiguousarray(payload, dtype=np.uint8)
        if p.ndim != 2 or p.shape != (n, spec.payload_bytes):
            raise ProtocolError(
                f"payload shape {p.shape} is not ({n}, {spec.payload_bytes})")
        with self._sig:
            self._raise_if_failed_locked()
            if self._cur is not None:
                raise ProtocolError("previous step still in flight")
            st = _Step(self._step_no, n, self._vnow)
            self._step_no += 1
        st.routes = r
        self._stage(st, p, r)
        self._arm(st)
        with self._sig:
            self._cur = st
        # Host signal precedes every same-node copy; the engine-side watcher
        # callback plays the proxy and posts the fabric writes.
        self.engine.trace.record("moe_host_signal", step=st.step,
                                 tokens=st.n)
        self._host_watch.store(st.step + 1)
        self._shm_private(st)
        if not self._peers:
            self._on_routes(st)

    def _stage(self, st: _Step, payload: np.ndarray, routes: np.ndarray) -> None:
        """Pack copies into per-destination slabs, local expert major."""
        spec = self.spec
        per_dest: list[list[tuple[int, int, int]]] = [[] for _ in range(spec.ranks)]
        for t in range(st.n):
            for j, e in enumerate(routes[t]):
                e = int(e)
                per_dest[spec.owner(e)].append((spec.local_index(e), t, j))
        counts = np.bincount(routes.ravel(), minlength=spec.experts) \
            if routes.size else np.zeros(spec.experts, np.int64)
        self._route_np[self.rank] = counts.astype("<u4")
        pos = np.full((st.n, spec.topk), -1, dtype=np.int64)
        off = 0
        self._send_starts = np.zeros(spec.ranks, dtype=np.int64)
        self._assigned_out = np.zeros(spec.ranks, dtype=np.int64)
        for d in range(spec.ranks):
            entries = sorted(per_dest[d])
            self._send_starts[d] = off
            self._assigned_out[d] = len(entries)
            for i, (_, t, j) in enumerate(entries):
                self._send_np[off + i] = payload[t]
                pos[t, j] = off + i
            off += len(entries)
        st.pos = pos
        st.send_rows = off

    def _arm(self, st: _Step) -> None:
        eng = self.engine
        imm_route, imm_token, imm_comb, imm_dbar = st.imms
        n_all, n_inter = len(self._peers), len(self._inter)
        if n_all:
            st.route_flag = eng.expect_imm_count(
                imm_route, n_all, cb=lambda _f, st=st: self._on_routes(st))
            st.dbar_flag = eng.expect_imm_count(imm_dbar, n_all)
        if n_inter:
            st.token_flag = eng.expect_imm_count(imm_token, 2 * n_inter)
            st.comb_flag = eng.expect_imm_count(imm_comb, n_inter)
        st.sends_left = 2 if n_inter else 0

    def _on_host_signal(self, old: int, new: int) -> None:
        with self._sig:
            st = self._cur
        if st is None or st.step + 1 != new:
            return
        if not self._peers:
            return
        eng = self.engine
        imm_route, imm_token, _, _ = st.imms
        row_bytes = self.spec.experts * 4
        row_off = self.rank * row_bytes
        eng.submit_scatter(
            self._all_group, self._route_h,
            [ScatterDst(row_bytes, row_off, p.route_desc, row_off)
             for p in self._peers],
            imm=imm_route, not_before=st.t0, label="moe.route")
        if self._inter:
            payload = self.spec.payload_bytes
            dsts = []
            for p in self._inter:
                take = min(self.private_tokens, int(self._assigned_out[p.rank]))
                dsts.append(ScatterDst(
                    take * payload,
                    int(self._send_starts[p.rank]) * payload,
                    p.priv_desc, self.rank * self.private_tokens * payload))
            eng.submit_scatter(self._inter_group, self._send_h, dsts,
                               imm=imm_token, not_before=st.t0,
                               label="moe.tok.priv",
                               on_done=lambda f, st=st: self._send_done(st, f))
        st.sent_first = True
        if st.layout_ready:
            self._post_main(st)

    def _shm_private(self, st: _Step) -> None:
        payload = self.spec.payload_bytes
        for p in self._intra:
            take = min(self.private_tokens, int(self._assigned_out[p.rank]))
            if take:
                base = int(self._send_starts[p.rank])
                dst0 = self.rank * self.private_tokens
                p.obj._priv_np[dst0:dst0 + take] = self._send_np[base:base + take]
            self.engine.trace.record("moe_shm_copy", step=st.step,
                                     lane="priv", dst=p.rank,
                                     nbytes=take * payload)
            p.obj._priv_watch[self.rank].store(st.step + 1)

    def _on_routes(self, st: _Step) -> None:
        """All count rows are in: derive the layout, send the remainder."""
        try:
            layout = compute_layout(self.spec,
                                    self._route_np.astype(np.int64))
        except ProtocolError as e:
            self._fail(str(e))
            return
        st.layout = layout
        self.last_layout = layout
        spec = self.spec
        payload = spec.payload_bytes
        me = self.rank
        base = int(self._send_starts[me])
        own = int(self._assigned_out[me])
        if own:
            dst0 = int(layout.recv_start[me, me])
            self._recv_np[dst0:dst0 + own] = self._send_np[base:base + own]
        for p in self._intra:
            take = min(self.private_tokens, int(self._assigned_out[p.rank]))
            rest = int(self._assigned_out[p.rank]) - take
            if rest:
                src0 = int(self._send_starts[p.rank]) + take
                dst0 = int(layout.recv_start[p.rank, me]) + take
                p.obj._recv_np[dst0:dst0 + rest] = \
                    self._send_np[src0:src0 + rest]
            self.engine.trace.record("moe_shm_copy", step=st.step,
                                     lane="main", dst=p.rank,
                                     nbytes=rest * payload)
            p.obj._main_watch[self.rank].store(st.step + 1)
        st.layout_ready = True
        if st.sent_first:
            self._post_main(st)
        st.routes_done.set()
        with self._sig:
            self._sig.notify_all()

    def _post_main(self, st: _Step) -> None:
        """Second-round posts; runs after both rounds one and the layout."""
        layout = st.layout
        assert layout is not None
        payload = self.spec.payload_bytes
        me = self.rank
        not_before = max(st.t0, st.route_flag.vtime if st.route_flag else 0.0)
        if self._inter:
            dsts = []
            for p in self._inter:
                take = min(self.private_tokens, int(self._assigned_out[p.rank]))
                rest = int(self._assigned_out[p.rank]) - take
                dsts.append(ScatterDst(
                    rest * payload,
                    (int(self._send_starts[p.rank]) + take) * payload,
                    p.recv_desc,
                    (int(layout.recv_start[p.rank, me]) + take) * payload))
            self.engine.submit_scatter(
                self._inter_group, self._send_h, dsts, imm=st.imms[1],
                not_before=not_before, label="moe.tok.main",
                on_done=lambda f, st=st: self._send_done(st, f))
        elif self._peers:
            self._post_barrier(st, not_before)

    def _send_done(self, st: _Step, flag: CompletionFlag) -> None:
        if not flag.ok:
            self._fail(flag.error or "dispatch write failed")
            return
        with self._sig:
            st.sends_left -= 1
            st.send_vmax = max(st.send_vmax, flag.vtime)
            done = st.sends_left == 0
        if done:
            self._post_barrier(st, st.send_vmax)

    def _post_barrier(self, st: _Step, not_before: float) -> None:
        st.barrier_flag = self.engine.submit_barrier(
            self._all_group, st.imms[3],
            [(p.route_desc, 0) for p in self._peers],
            not_before=not_before, label="moe.dbar")
        st.barrier_posted.set()
        with self._sig:
            self._sig.notify_all()

    def dispatch_recv(self, timeout: float | None = 30.0) -> GroupedTokens:
        """Block until every expected count is reached, then regroup."""
        with self._sig:
            st = self._cur
        if st is None:
            raise ProtocolError("no step in flight")
        deadline = None if timeout is None else time.monotonic() + timeout
        self._await_flag(st.route_flag, deadline, st, "route counts")
        while not st.routes_done.is_set():
            with self._sig:
                self._raise_if_failed_locked()
            rem = self._remaining(deadline)
            if rem is not None and rem <= 0.0:
                raise self._timeout_error(st, "layout derivation")
            st.routes_done.wait(_WAIT_SLICE_S if rem is None
                                else min(rem, _WAIT_SLICE_S))
        with self._sig:
            self._raise_if_failed_locked()
        self._await_flag(st.token_flag, deadline, st, "token writes")
        self._await_flag(st.dbar_flag, deadline, st, "dispatch barrier")
        self._await_intra(self._priv_seen, st.step + 1, deadline, st,
                          "same-node speculative copies")
        self._await_intra(self._main_seen, st.step + 1, deadline, st,
                          "same-node token copies")
        layout = st.layout
        assert layout is not None
        spec = self.spec
        me = self.rank
        for p in self._peers:
            take = min(self.private_tokens, int(layout.assigned[p.rank, me]))
            if take:
                src0 = p.rank * self.private_tokens
                dst0 = int(layout.recv_start[me, p.rank])
                self._recv_np[dst0:dst0 + take] = self._priv_np[src0:src0 + take]
        rows: list[int] = []
        srcs: list[int] = []
        sizes = np.zeros(spec.local_experts, dtype=np.int64)
        starts = np.zeros(spec.local_experts, dtype=np.int64)
        off = 0
        for le in range(spec.local_experts):
            starts[le] = off
            size = 0
            for s in range(spec.ranks):
                start, length = layout.range_of(me, le, s)
                rows.extend(range(start, start + length))
                srcs.extend([s] * length)
                size += length
            padded = -(-size // GROUP_PAD) * GROUP_PAD
            rows.extend([-1] * (padded - size))
            srcs.extend([-1] * (padded - size))
            sizes[le] = size
            off += padded
        rows_arr = np.asarray(rows, dtype=np.int64)
        srcs_arr = np.asarray(srcs, dtype=np.int64)
        data = np.zeros((off, spec.payload_bytes), dtype=np.uint8)
        valid = rows_arr >= 0
        if valid.any():
            data[valid] = kernels.pack_rows(self._recv_np, rows_arr[valid])
        st.grouped = GroupedTokens(data=data, group_sizes=sizes,
                                   group_starts=starts, rows=rows_arr,
                                   sources=srcs_arr)
        vts = [st.t0]
        for f in (st.route_flag, st.token_flag, st.dbar_flag):
            if f is not None:
                vts.append(f.vtime)
        st.disp_vtime = max(vts)
        self.engine.trace.record(
            "moe_dispatch_done", vtime=st.disp_vtime, step=st.step,
            tokens=int(sizes.sum()), used=int(layout.recv_total[me]),
            capacity=spec.capacity)
        return st.grouped

    # ------------------------------------------------------------- combine

    def combine_send(self, outputs: np.ndarray) -> None:
        """Scatter expert outputs back into every source's send buffer."""
        with self._sig:
            st = self._cur
            self._raise_if_failed_locked()
        if st is None or st.grouped is None:
            raise ProtocolError("combine before dispatch completed")
        out = np.ascontiguousarray(outputs, dtype=np.uint8)
        if out.shape != st.grouped.data.shape:
            raise ProtocolError(
                f"output shape {out.shape} != {st.grouped.data.shape}")
        layout = st.layout
        assert layout is not None
        spec = self.spec
        payload = spec.payload_bytes
        me = self.rank
        # The receive buffer doubles as the combine source; storing into it
        # is safe only now that the dispatch barrier has been counted.
        self.engine.trace.record("moe_combine_store", step=st.step)
        valid = st.grouped.rows >= 0
        self._recv_np[st.grouped.rows[valid]] = out[valid]
        own = int(layout.assigned[me, me])
        if own:
            src0 = int(layout.recv_start[me, me])
            dst0 = int(layout.send_start[me, me])
            self._send_np[dst0:dst0 + own] = self._recv_np[src0:src0 + own]
        for p in self._intra:
            cnt = int(layout.assigned[p.rank, me])
            if cnt:
                src0 = int(layout.recv_start[me, p.rank])
                dst0 = int(layout.send_start[p.rank, me])
                p.obj._send_np[dst0:dst0 + cnt] = self._recv_np[src0:src0 + cnt]
            self.engine.trace.record("moe_shm_copy", step=st.step,
                                     lane="comb", dst=p.rank,
                                     nbytes=cnt * payload)
            p.obj._comb_watch[self.rank].store(st.step + 1)
        if self._inter:
            # Combine posts trail our own barrier post so every step's
            # fabric writes leave in one fixed order.
            gate = time.monotonic() + 30.0
            while not st.barrier_posted.is_set():
                with self._sig:
                    self._raise_if_failed_locked()
                if time.monotonic() >= gate:
                    raise self._timeout_error(st, "dispatch barrier post")
                st.barrier_posted.wait(_WAIT_SLICE_S)
            dsts = []
            for p in self._inter:
                cnt = int(layout.assigned[p.rank, me])
                dsts.append(ScatterDst(
                    cnt * payload,
                    int(layout.recv_start[me, p.rank]) * payload,
                    p.send_desc,
                    int(layout.send_start[p.rank, me]) * payload))
            self.engine.submit_scatter(
                self._inter_group, self._recv_h, dsts, imm=st.imms[2],
                not_before=st.disp_vtime, label="moe.comb",
                on_done=lambda f: self._check_send(f))

    def _check_send(self, flag: CompletionFlag) -> None:
        if not flag.ok:
            self._fail(flag.error or "combine write failed")

    def combine_recv(self, weights: np.ndarray,
                     timeout: float | None = 30.0) -> np.ndarray:
        """Weighted fp32 average of the returned expert outputs per token."""
        with self._sig:
            st = self._cur
        if st is None or st.grouped is None:
            raise ProtocolError("combine before dispatch completed")
        w = np.ascontiguousarray(weights, dtype=np.float32)
        if w.shape != (st.n, self.spec.topk):
            raise ProtocolError(
                f"weight shape {w.shape} is not ({st.n}, {self.spec.topk})")
        deadline = None if timeout is None else time.monotonic() + timeout
        self._await_flag(st.comb_flag, deadline, st, "combine writes")
        self._await_intra(self._comb_seen, st.step + 1, deadline, st,
                          "same-node combine copies")
        rows = st.pos
        assert rows is not None
        y = decode_tokens(self.spec, self._send_np[:max(1, st.send_rows)])
        out = kernels.weighted_combine(y, rows, w) if st.n else \
            np.zeros((0, self.spec.hidden), dtype=np.float32)
        comb_vtime = max(st.disp_vtime,
                         st.comb_flag.vtime if st.comb_flag else 0.0)
        self.engine.trace.record("moe_combine_done", vtime=comb_vtime,
                                 step=st.step, tokens=st.n)
        self.step_stats.append(StepStats(
            step=st.step, start_vtime=st.t0, dispatch_vtime=st.disp_vtime,
            combine_vtime=comb_vtime))
        with self._sig:
            self._vnow = comb_vtime
            self._cur = None
            self._sig.notify_all()
        return out

    # -------------------------------------------------------------- waiting

    @staticmethod
    def _remaining(deadline: float | None) -> float | None:
        if deadline is None:
            return None
        return max(0.0, deadline - time.monotonic())

    def _await_flag(self, flag: ImmFlag | None, deadline: float | None,
                    st: _Step, what: str) -> None:
        while flag is not None and not flag.done():
            with self._sig:
                self._raise_if_failed_locked()
            rem = self._remaining(deadline)
            if rem is not None and rem <= 0.0:
                raise self._timeout_error(st, what)
            flag.wait(_WAIT_SLICE_S if rem is None else min(rem, _WAIT_SLICE_S))
        with self._sig:
            self._raise_if_failed_locked()

    def _await_intra(self, seen: dict[int, int], target: int,
                     deadline: float | None, st: _Step, what: str) -> None:
        with self._sig:
            while True:
                self._raise_if_failed_locked()
                if all(v >= target for v in seen.values()):
                    return
                rem = self._remaining(deadline)
                if rem is not None and rem <= 0.0:
                    break
                self._sig.wait(_WAIT_SLICE_S if rem is None
                               else min(rem, _WAIT_SLICE_S))
        raise self._timeout_error(st, what)

    def _timeout_error(self, st: _Step, what: str) -> ProtocolError:
        return ProtocolError(
            f"rank {self.rank} step {st.step} timed out waiting for {what}; "
            f"missing: {self._diagnose(st)}")

    def _diagnose(self, st: _Step) -> dict[str, object]:
        """Which sources have not been heard from, per signal lane."""
        imm_route, imm_token, imm_comb, imm_dbar = st.imms
        diag: dict[str, object] = {}
        for name, imm, flag, need in (
                ("route", imm_route, st.route_flag, 1),
                ("token", imm_token, st.token_flag, 2),
                ("combine", imm_comb, st.comb_flag, 1),
                ("barrier", imm_dbar, st.dbar_flag, 1)):
            if flag is None or flag.done():
                continue
            got: dict[int, int] = {}
            for ev in self.engine.trace.events("imm_recv", imm=imm):
                r = self._rank_of_addr.get(ev.fields.get("sender", ""))
                if r is not None:
                    got[r] = got.get(r, 0) + 1
            expect = self._peers if name in ("route", "barrier") else self._inter
            diag[name] = sorted(p.rank for p in expect
                                if got.get(p.rank, 0) < need)
        for name, seen in (("shm_private", self._priv_seen),
                           ("shm_main", self._main_seen),
                           ("shm_combine", self._comb_seen)):
            lag = {s: v for s, v in seen.items() if v < st.step + 1}
            if lag:
                diag[name] = lag
        return diag

    def _fail(self, msg: str) -> None:
        with self._sig:
            if self._error is None:
                self._error = msg
            self._sig.notify_all()

    def _raise_if_failed_locked(self) -> None:
        if self._error is not None:
            raise ProtocolError(self._error)

    # ---------------------------------------------------------------- close

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.engine.free_watcher(self._host_watch)
        for lane in (self._priv_watch, self._main_watch, self._comb_watch):
            for w in lane.values():
                self.engine.free_watcher(w)
        for h in (self._route_h, self._recv_h, self._priv_h, self._send_h):
            self.engine.dereg_mr(h)


def build_mesh(engines: Sequence[TransferEngine], spec: RoutingSpec, *,
               private: PrivateBufferConfig | None = None,
               ranks_per_node: int = 1) -> list[MoeRank]:
    """Wire one MoeRank per engine; ranks r // ranks_per_node share a node."""
    if len(engines) != spec.ranks:
        raise ProtocolError(f"{len(engines)} engines for {spec.ranks} ranks")
    if ranks_per_node < 1:
        raise ProtocolError("ranks_per_node must be positive")
    if private is None:
        private = PrivateBufferConfig(min(DEFAULT_PRIVATE, spec.max_tokens))
    mesh = [MoeRank(r, engines[r], spec, private, node=r // ranks_per_node)
            for r in range(spec.ranks)]
    for rank in mesh:
        rank._connect(mesh)
    return mesh
