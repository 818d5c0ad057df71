"""Invariant battery run under every fabric delivery mode.

Each check builds its own engines on a fabric with the given fault
configuration and asserts end-state plus ordering invariants. The battery
covers the engine primitives and all three protocols; the acceptance
suite runs it across the full mode x seed grid.
"""

from __future__ import annotations

import threading
import time
from typing import Callable, Sequence

import numpy as np

from railtx import FaultConfig, Pages, ScatterDst
from railtx.kvcache import (DecoderNode, KvLayout, PrefillerNode,
                            context_bytes, page_bytes)
from railtx.moe import (MoeRank, PrivateBufferConfig, RoutingSpec,
                        build_mesh, decode_tokens, encode_tokens)
from railtx.weights import (DT_BF16, DT_FP8, ParamMeta, build_schedule,
                            fill_store, infer_layout, prepare, run_step)

from _fabric import engine_pair, engines
from _oracles import (coverage_oracle, moe_combine_oracle,
                      moe_dispatch_oracle)


def _wait_for(pred: Callable[[], bool], timeout: float = 10.0) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.005)
    return pred()


# ------------------------------------------------------------------ engine


def check_engine_writes(cfg: FaultConfig) -> None:
    """Paged and single writes land byte-identical; the immediate fires
    once, and the full payload is visible at fire time."""
    with engine_pair(cfg, rails=4) as (a, b):
        rng = np.random.default_rng(cfg.seed + 101)
        n = 256 * 1024
        src = rng.integers(0, 256, n, dtype=np.uint8)
        dst1 = np.zeros(n, dtype=np.uint8)
        dst2 = np.zeros(n, dtype=np.uint8)
        h, _ = a.reg_mr(src)
        _, d1 = b.reg_mr(dst1)
        _, d2 = b.reg_mr(dst2)

        snaps1: list[bytes] = []
        snaps2: list[bytes] = []
        f1 = b.expect_imm_count(11, 1, cb=lambda _f: snaps1.append(dst1.tobytes()))
        f2 = b.expect_imm_count(12, 1, cb=lambda _f: snaps2.append(dst2.tobytes()))

        order = tuple(rng.permutation(64))
        pages = Pages(order, 4096)
        a.submit_paged_writes(4096, (h, pages), (d1, pages), imm=11).result(30.0)
        a.submit_single_write(n, (h, 0), (d2, 0), imm=12).result(30.0)

        assert f1.wait(10.0) and f2.wait(10.0)
        assert _wait_for(lambda: len(snaps1) == 1 and len(snaps2) == 1)
        want = src.tobytes()
        assert snaps1 == [want], "payload incomplete at paged-write fire"
        assert snaps2 == [want], "payload incomplete at single-write fire"
        assert dst1.tobytes() == want and dst2.tobytes() == want


def check_imm_threshold(cfg: FaultConfig) -> None:
    """Expectations fire exactly once at their threshold; arming after the
    receipts already arrived fires from the recorded residue."""
    with engine_pair(cfg, rails=4) as (a, b):
        src = np.zeros(1, dtype=np.uint8)
        dst = np.zeros(1, dtype=np.uint8)
        h, _ = a.reg_mr(src)
        _, desc = b.reg_mr(dst)

        counts = {imm: 2 + imm % 5 for imm in range(20, 28)}
        fires: dict[int, int] = {imm: 0 for imm in counts}
        early = {}
        for imm in list(counts)[:4]:
            def cb(f, imm=imm):
                fires[imm] += 1
            early[imm] = b.expect_imm_count(imm, counts[imm], cb=cb)

        flags = []
        for imm, c in counts.items():
            for _ in range(c):
                flags.append(a.submit_single_write(1, (h, 0), (desc, 0), imm=imm))
        for f in flags:
            f.result(30.0)

        for imm, f in early.items():
            assert f.wait(10.0), f"imm {imm} never fired"
        # receipts for the late half are residue by now
        assert _wait_for(
            lambda: all(len(b.trace.events("imm_recv", imm=i)) == counts[i]
                        for i in list(counts)[4:]))
        for imm in list(counts)[4:]:
            def cb(f, imm=imm):
                fires[imm] += 1
            f = b.expect_imm_count(imm, counts[imm], cb=cb)
            assert f.wait(2.0), f"imm {imm} did not fire from residue"
        assert _wait_for(lambda: all(v == 1 for v in fires.values()))
        assert all(len(b.trace.events("imm_fire", imm=i)) == 1 for i in counts)


def check_scatter_barrier(cfg: FaultConfig) -> None:
    """Scatter delivers disjoint slices to each peer; a zero-length barrier
    write still delivers its immediate."""
    with engines(cfg, 4, rails=2) as es:
        rng = np.random.default_rng(cfg.seed + 103)
        src = rng.integers(0, 256, 3 * 8192, dtype=np.uint8)
        h, _ = es[0].reg_mr(src)
        bufs, descs, flags = [], [], []
        for i, e in enumerate(es[1:]):
            buf = np.zeros(8192, dtype=np.uint8)
            _, d = e.reg_mr(buf)
            bufs.append(buf)
            descs.append(d)
            flags.append((e.expect_imm_count(31, 1), e.expect_imm_count(32, 1)))
        group = es[0].add_peer_group([d.rkeys[0][0] for d in descs])
        dsts = [ScatterDst(8192, i * 8192, d, 0) for i, d in enumerate(descs)]
        es[0].submit_scatter(group, h, dsts, imm=31).result(30.0)
        es[0].submit_barrier(group, 32, [(d, 0) for d in descs]).result(30.0)

        for i, (ftok, fbar) in enumerate(flags):
            assert ftok.wait(10.0) and fbar.wait(10.0)
            assert bufs[i].tobytes() == src[i * 8192:(i + 1) * 8192].tobytes()


# ----------------------------------------------------------------- kvcache


def check_kvcache(cfg: FaultConfig) -> None:
    """Pages and context land byte-identical, completion postdates every
    payload byte, and cancellation leaves the pool quiet."""
    layout = KvLayout(4, 2, 1, 8192)
    with engine_pair(cfg, rails=2) as (pe, de):
        pre = PrefillerNode(pe, step_delay_s=0.004)
        dec = DecoderNode(de, layout, pool_slots=layout.slots, local_heads=1)
        try:
            t = dec.request_prefill(pre.address, ctx_len=1024)
            assert t.wait(30.0), "prefill did not complete"
            rid = t.request_id
            B = layout.page_len
            for layer in range(layout.layers):
                for i in range(layout.slots):
                    assert bytes(dec.page_view(t, layer, 0, i)) == \
                        page_bytes(rid, layer, 0, i, B)
            assert bytes(t.ctx[:1024]) == context_bytes(rid, 1024)

            trace = de.trace
            kv_rkeys = {rk for _, rk in dec.kv_desc.rkeys}
            done_seq = trace.events("kv_complete", request=rid)[0].seq
            applied = sum(e.fields["nbytes"]
                          for e in trace.events("frag_apply")
                          if e.fields["rkey"] in kv_rkeys and e.seq < done_seq)
            assert applied == layout.layers * layout.slots * B
            dec.release(t)

            t2 = dec.request_prefill(pre.address, ctx_len=1024)
            time.sleep(0.012)
            dec.cancel(t2)
            assert _wait_for(lambda: t2.completed.is_set()
                             or t2.token.state.name == "CONFIRMED", 30.0)
            if not t2.completed.is_set():
                conf = trace.events("kv_cancel_confirmed",
                                    request=t2.request_id)
                assert conf, "cancel neither confirmed nor completed"
                conf_seq = conf[0].seq
                pool = dec.kv.copy()
                time.sleep(0.15)
                late = [e for e in trace.events("frag_apply")
                        if e.fields["rkey"] in kv_rkeys and e.seq > conf_seq]
                assert not late, f"{len(late)} writes after confirmation"
                assert np.array_equal(pool, dec.kv)
        finally:
            dec.close()
            pre.close()


# ----------------------------------------------------------------- weights


def small_topology() -> tuple[dict[int, list[ParamMeta]],
                              dict[int, list[ParamMeta]]]:
    train = {
        0: [ParamMeta("w0", (8, 16), DT_BF16, group=0),
            ParamMeta("w2", (8, 16), DT_BF16, group=0, shard_index=0,
                      shard_count=2),
            ParamMeta("w3", (4, 8), DT_FP8, group=1, offload=True)],
        1: [ParamMeta("w1", (4, 16), DT_FP8, group=0),
            ParamMeta("w2", (8, 16), DT_BF16, group=0, shard_index=1,
                      shard_count=2)],
    }
    infer = {
        0: [ParamMeta("w0", (8, 16), DT_BF16, group=0),
            ParamMeta("w1", (4, 16), DT_FP8, group=0),
            ParamMeta("w2", (8, 16), DT_BF16, group=0, shard_index=0,
                      shard_count=2),
            ParamMeta("w3", (4, 8), DT_FP8, group=1)],
        1: [ParamMeta("w0", (8, 16), DT_BF16, group=0),
            ParamMeta("w2", (8, 16), DT_BF16, group=0, shard_index=1,
                      shard_count=2),
            ParamMeta("w3", (4, 8), DT_FP8, group=1)],
    }
    return train, infer


def check_weights(cfg: FaultConfig) -> None:
    """One publication step: every destination byte-identical to the
    prepared payload, exactly-once coverage, watermark respected."""
    train, infer = small_topology()
    watermark = 1 << 20
    with engines(cfg, 4, rails=2, prefix="wt") as es:
        senders = {0: es[0], 1: es[1]}
        receivers = {0: es[2], 1: es[3]}
        regions, descs = {}, {}
        for q, metas in infer.items():
            total, _ = infer_layout(metas)
            buf = np.zeros(total, dtype=np.uint8)
            _, d = receivers[q].reg_mr(buf)
            regions[q], descs[q] = buf, d
        sched = build_schedule(train, infer, rank_descs=descs)

        delivered = {}
        for t in sched.tasks:
            key = (t.name, t.axis, t.shard_index, t.shard_count)
            assert key not in delivered, f"{key} scheduled twice"
            delivered[key] = {r for r, _, _ in t.dsts}
        assert delivered == coverage_oracle(infer)

        store = fill_store(train, cfg.seed)
        report = run_step(senders, sched, store, watermark=watermark)
        assert all(v <= watermark for v in report.peak_temp_by_rank.values())
        for t in sched.tasks:
            want = prepare(t, store)
            for q, _d, off in t.dsts:
                assert bytes(regions[q][off:off + t.nbytes]) == want, t.name


# --------------------------------------------------------------------- moe


def expert_fn(e: int, x: np.ndarray) -> np.ndarray:
    return (x * np.float32(1.0 + 0.25 * e) + np.float32(e)).astype(np.float32)


def run_moe_round(mesh: Sequence[MoeRank], spec: RoutingSpec,
                  routes: Sequence[np.ndarray],
                  values: Sequence[np.ndarray],
                  weights: Sequence[np.ndarray],
                  timeout: float = 30.0) -> list[tuple]:
    """Drive one dispatch/combine step on every rank; returns per-rank
    (grouped tokens, combined [t, hidden]) results."""
    results: list[tuple] = [None] * spec.ranks
    errors: list[Exception] = []

    def worker(r: int) -> None:
        try:
            rank = mesh[r]
            rank.dispatch_send(encode_tokens(spec, values[r]), routes[r])
            grouped = rank.dispatch_recv(timeout)
            out = np.zeros_like(grouped.data)
            for le in range(spec.local_experts):
                s = int(grouped.group_starts[le])
                cnt = int(grouped.group_sizes[le])
                if cnt:
                    xs = decode_tokens(spec, grouped.data[s:s + cnt])
                    ys = np.stack([expert_fn(r * spec.local_experts + le, x)
                                   for x in xs])
                    out[s:s + cnt] = encode_tokens(spec, ys)
            rank.combine_send(out)
            results[r] = (grouped, rank.combine_recv(weights[r], timeout))
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(r,), daemon=True)
               for r in range(spec.ranks)]
    for th in threads:
        th.start()
    for th in threads:
        th.join(timeout + 10.0)
    if errors:
        raise errors[0]
    assert all(r is not None for r in results), "a rank never finished"
    return results


def random_step(spec: RoutingSpec, rng: np.random.Generator,
                tokens: int | None = None) -> tuple:
    counts = [tokens if tokens is not None
              else int(rng.integers(0, spec.max_tokens + 1))
              for _ in range(spec.ranks)]
    routes = [np.stack([rng.choice(spec.experts, spec.topk, replace=False)
                        for _ in range(c)]).astype(np.int64)
              if c else np.zeros((0, spec.topk), np.int64) for c in counts]
    values = [rng.standard_normal((c, spec.hidden)).astype(np.float32)
              for c in counts]
    weights = [rng.random((c, spec.topk)).astype(np.float32)
               for c in counts]
    return routes, values, weights


def verify_moe_round(spec: RoutingSpec, results: Sequence[tuple],
                     routes: Sequence[np.ndarray],
                     values: Sequence[np.ndarray],
                     weights: Sequence[np.ndarray],
                     tol: float = 1e-6) -> None:
    want = moe_dispatch_oracle(spec.ranks, spec.experts, routes,
                               [encode_tokens(spec, v) for v in values])
    for d in range(spec.ranks):
        grouped = results[d][0]
        for le in range(spec.local_experts):
            s = int(grouped.group_starts[le])
            cnt = int(grouped.group_sizes[le])
            got = sorted(grouped.data[s + i].tobytes() for i in range(cnt))
            assert got == sorted(want[(d, le)]), \
                f"dispatch multiset mismatch at rank {d} expert {le}"
    ref = moe_combine_oracle(routes, weights, values, expert_fn)
    for r in range(spec.ranks):
        got = results[r][1]
        assert got.shape == ref[r].shape
        if got.size:
            err = float(np.max(np.abs(got - ref[r])))
            assert err <= tol, f"combine error {err} at rank {r}"


def check_moe(cfg: FaultConfig) -> None:
    """Dispatch/combine equals the all-to-all oracle; the instrumented
    receive occupancy stays within capacity; write budget holds."""
    spec = RoutingSpec(ranks=2, experts=4, max_tokens=4, topk=2, hidden=8,
                       elem_size=4, scales=0)
    with engines(cfg, spec.ranks, rails=2, prefix="m") as es:
        mesh = build_mesh(es, spec, private=PrivateBufferConfig(2))
        try:
            rng = np.random.default_rng(cfg.seed + 104)
            steps = 3
            for _ in range(steps):
                routes, values, weights = random_step(spec, rng)
                results = run_moe_round(mesh, spec, routes, values, weights)
                verify_moe_round(spec, results, routes, values, weights)
            for r, e in enumerate(es):
                for ev in e.trace.events("moe_dispatch_done"):
                    assert ev.fields["used"] <= ev.fields["capacity"]
                labels = e.trace.labels()
                tok = comb = 0
                for ev in e.trace.events("wr_post"):
                    lb = labels.get(ev.fields.get("transfer"), "")
                    if lb.startswith("moe.tok."):
                        tok += 1
                    elif lb == "moe.comb":
                        comb += 1
                peers = spec.ranks - 1
                assert tok <= 2 * steps * peers, f"rank {r}: {tok} token writes"
                assert comb == steps * peers, f"rank {r}: {comb} combine writes"
        finally:
            for rank in mesh:
                rank.close()


BATTERY: tuple[tuple[str, Callable[[FaultConfig], None]], ...] = (
    ("engine-writes", check_engine_writes),
    ("imm-threshold", check_imm_threshold),
    ("scatter-barrier", check_scatter_barrier),
    ("kvcache", check_kvcache),
    ("weights", check_weights),
    ("moe", check_moe),
)


def run_battery(cfg: FaultConfig) -> list[str]:
    """Run every check; returns failure descriptions (empty = all green)."""
    failures = []
    for name, fn in BATTERY:
        try:
            fn(cfg)
        except Exception as exc:
            failures.append(f"{name}: {type(exc).__name__}: {exc}")
    return failures
