"""Console entry points.

Four commands ship with the package:

* ``kvdemo``     two-node paged KV transfer with a cancellation round
* ``wtransfer``  one training-to-inference weight publication step
* ``moebench``   MoE dispatch/combine latency benchmark
* ``railbench``  raw point-to-point and kernel benchmarks

``kvdemo`` and ``wtransfer`` accept ``--transport socket`` to run each node
in its own process over the UDP backend, or ``--transport sim`` to run all
nodes in one process on the simulated fabric.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing as mp
import sys
import time
from typing import Any, Sequence

import numpy as np

from .bench import (KernelBenchConfig, MoeBenchConfig, P2pConfig,
                    bench_kernels, bench_moe, bench_p2p)
from .bootstrap import Rendezvous
from .engine import TransferEngine
from .errors import ProtocolError
from .kvcache import (CancelState, DecoderNode, KvLayout, PrefillerNode,
                      context_bytes, page_bytes)
from .transport import FaultConfig, SimFabric
from .transport.udp import UdpFabric
from .weights import (ParamMeta, StageTimes, build_schedule, dump_schedule,
                      fill_store, infer_layout, prepare, run_step,
                      DT_BF16, DT_FP8)
from .wire import NetAddr, decode_mrdesc, decode_netaddr, encode_mrdesc, \
    encode_netaddr

_RESULT_TIMEOUT_S = 180.0


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _write_json(path: str | None, obj: dict[str, Any]) -> None:
    if not path:
        return
    with open(path, "w") as fp:
        json.dump(obj, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(c) for c in r] for r in [header, *rows]]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths))
                     for r in cells)


def _fabric_args(p: argparse.ArgumentParser, *, rails: int = 2) -> None:
    p.add_argument("--transport", choices=("sim", "socket"),
                   default="socket")
    p.add_argument("--rails", type=int, default=rails)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reorder", choices=("none", "random", "reverse"),
                   default="random",
                   help="delivery scrambling on the simulated fabric")


# ------------------------------------------------------------------- kvdemo


def _kv_verify_pages(dec: DecoderNode, ticket: Any) -> bool:
    layout = dec.layout
    B = layout.page_len
    rid = ticket.request_id
    for layer in range(layout.layers):
        for head in range(dec.local_heads):
            for i in range(layout.slots):
                want = page_bytes(rid, layer, head, i, B)
                if bytes(dec.page_view(ticket, layer, head, i)) != want:
                    return False
    return True


def _kv_decoder_run(dec: DecoderNode, pre_addr: NetAddr,
                    ns: dict[str, Any]) -> dict[str, Any]:
    """Drive one full prefill and one cancelled prefill, then audit the
    trace: completion must postdate every payload byte, and confirmation
    must postdate the last write into the pool."""
    layout = dec.layout
    trace = dec.engine.trace
    kv_rkeys = {rk for _, rk in dec.kv_desc.rkeys}
    ctx_len = ns["ctx_bytes"]

    ticket = dec.request_prefill(pre_addr, ctx_len=ctx_len)
    if not ticket.wait(60.0):
        raise ProtocolError("prefill did not complete within 60s")
    rid = ticket.request_id
    pages_ok = _kv_verify_pages(dec, ticket)
    ctx_ok = bytes(ticket.ctx[:ctx_len]) == context_bytes(rid, ctx_len)

    done = trace.events("kv_complete", request=rid)
    done_seq = done[0].seq if done else -1
    applied = sum(e.fields["nbytes"] for e in trace.events("frag_apply")
                  if e.fields["rkey"] in kv_rkeys and e.seq < done_seq)
    expected = layout.layers * layout.slots * dec.local_heads * layout.page_len
    never_early = done_seq >= 0 and applied == expected
    dec.release(ticket)

    second = dec.request_prefill(pre_addr, ctx_len=ctx_len)
    time.sleep(ns["cancel_after_ms"] / 1e3)
    dec.cancel(second)
    deadline = time.monotonic() + 60.0
    while time.monotonic() < deadline:
        if second.completed.is_set() \
                or second.token.state is CancelState.CONFIRMED:
            break
        time.sleep(0.01)
    confirmed = second.token.state is CancelState.CONFIRMED

    if confirmed:
        conf = trace.events("kv_cancel_confirmed", request=second.request_id)
        conf_seq = conf[0].seq
        progress = int(conf[0].fields.get("progress", -1))
        pool = dec.kv.copy()
        time.sleep(0.4)
        late = [e for e in trace.events("frag_apply")
                if e.fields["rkey"] in kv_rkeys and e.seq > conf_seq]
        cancel_clean = not late and np.array_equal(pool, dec.kv)
        outcome = "confirmed"
    elif second.completed.is_set():
        progress = layout.steps
        cancel_clean = _kv_verify_pages(dec, second)
        outcome = "completed"
    else:
        progress = -1
        cancel_clean = False
        outcome = "lost"

    return {
        "transfer_ok": bool(pages_ok and ctx_ok),
        "decode_never_early": bool(never_early),
        "kv_bytes_before_complete": applied,
        "kv_bytes_expected": expected,
        "cancel_outcome": outcome,
        "cancel_clean": bool(cancel_clean),
        "cancel_progress": progress,
        "steps": layout.steps,
    }


def _kv_layout(ns: dict[str, Any]) -> KvLayout:
    return KvLayout(ns["layers"], ns["chunks"], 1, ns["page_bytes"])


def _kv_decoder_proc(port_q: Any, res_q: Any, ns: dict[str, Any]) -> None:
    try:
        rdv = Rendezvous(0, 2, timeout=60.0, ready_cb=port_q.put)
        fabric = UdpFabric()
        eng = TransferEngine(fabric, rails=ns["rails"], name="dec")
        layout = _kv_layout(ns)
        dec = DecoderNode(eng, layout, pool_slots=layout.slots,
                          local_heads=ns["heads"])
        peer = decode_netaddr(rdv.allgather(encode_netaddr(dec.address))[1])
        result = _kv_decoder_run(dec, peer, ns)
        rdv.barrier()
        if ns["trace"]:
            eng.trace.dump_path(ns["trace"] + ".decoder.jsonl")
        res_q.put(("decoder", result))
        dec.close()
        eng.close()
        rdv.close()
    except Exception as exc:
        res_q.put(("decoder", {"error": f"{type(exc).__name__}: {exc}"}))


def _kv_prefiller_proc(port: int, res_q: Any, ns: dict[str, Any]) -> None:
    try:
        rdv = Rendezvous(1, 2, port=port, timeout=60.0)
        fabric = UdpFabric()
        eng = TransferEngine(fabric, rails=ns["rails"], name="pre")
        pre = PrefillerNode(eng, step_delay_s=ns["step_delay_ms"] / 1e3)
        rdv.allgather(encode_netaddr(pre.address))
        rdv.barrier()
        if ns["trace"]:
            eng.trace.dump_path(ns["trace"] + ".prefiller.jsonl")
        res_q.put(("prefiller", {}))
        pre.close()
        eng.close()
        rdv.close()
    except Exception as exc:
        res_q.put(("prefiller", {"error": f"{type(exc).__name__}: {exc}"}))


def _kv_run_socket(ns: dict[str, Any]) -> dict[str, Any]:
    ctx = mp.get_context("spawn")
    port_q = ctx.Queue()
    res_q = ctx.Queue()
    dproc = ctx.Process(target=_kv_decoder_proc, args=(port_q, res_q, ns),
                        daemon=True)
    dproc.start()
    port = port_q.get(timeout=30.0)
    pproc = ctx.Process(target=_kv_prefiller_proc, args=(port, res_q, ns),
                        daemon=True)
    pproc.start()
    got = dict(res_q.get(timeout=_RESULT_TIMEOUT_S) for _ in range(2))
    dproc.join(30.0)
    pproc.join(30.0)
    for role in ("decoder", "prefiller"):
        if "error" in got.get(role, {}):
            raise ProtocolError(f"{role}: {got[role]['error']}")
    result = got["decoder"]
    result["transport"] = "socket"
    return result


def _kv_run_sim(ns: dict[str, Any]) -> dict[str, Any]:
    fabric = SimFabric(FaultConfig(seed=ns["seed"], reorder=ns["reorder"]))
    pre_eng = TransferEngine(fabric, rails=ns["rails"], name="pre")
    dec_eng = TransferEngine(fabric, rails=ns["rails"], name="dec")
    pre = PrefillerNode(pre_eng, step_delay_s=ns["step_delay_ms"] / 1e3)
    layout = _kv_layout(ns)
    dec = DecoderNode(dec_eng, layout, pool_slots=layout.slots,
                      local_heads=ns["heads"])
    try:
        result = _kv_decoder_run(dec, pre.address, ns)
    finally:
        if ns["trace"]:
            dec_eng.trace.dump_path(ns["trace"] + ".decoder.jsonl")
            pre_eng.trace.dump_path(ns["trace"] + ".prefiller.jsonl")
        dec.close()
        pre.close()
        dec_eng.close()
        pre_eng.close()
    result["transport"] = "sim"
    return result


def kvdemo_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(
        prog="kvdemo",
        description="Paged KV-cache transfer between a prefiller and a "
                    "decoder, plus a mid-flight cancellation round.")
    _fabric_args(p)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--chunks", type=int, default=4)
    p.add_argument("--page-bytes", type=int, default=64 << 10)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--ctx-bytes", type=int, default=4096)
    p.add_argument("--step-delay-ms", type=float, default=10.0,
                   help="simulated compute per (chunk, layer) step")
    p.add_argument("--cancel-after-ms", type=float, default=80.0)
    p.add_argument("--out", default=None, help="write the result JSON here")
    p.add_argument("--trace", default=None,
                   help="dump traces to PREFIX.decoder.jsonl etc.")
    args = p.parse_args(argv)
    ns = vars(args)

    try:
        result = _kv_run_sim(ns) if args.transport == "sim" \
            else _kv_run_socket(ns)
    except Exception as exc:
        print(f"kvdemo failed: {exc}", file=sys.stderr)
        return 1
    _write_json(args.out, result)

    ok = (result["transfer_ok"] and result["decode_never_early"]
          and result["cancel_clean"])
    print(f"kvdemo: transport={result['transport']} rails={args.rails} "
          f"layers={args.layers} chunks={args.chunks} "
          f"page={args.page_bytes}B")
    print(f"  transfer     "
          f"{'ok' if result['transfer_ok'] else 'FAILED'} "
          f"(pages and context byte-identical)")
    print(f"  decode gate  "
          f"{'ok' if result['decode_never_early'] else 'FAILED'} "
          f"({result['kv_bytes_before_complete']}/"
          f"{result['kv_bytes_expected']} payload bytes applied before "
          f"completion)")
    print(f"  cancel       {result['cancel_outcome']} "
          f"(progress {result['cancel_progress']}/{result['steps']}, "
          f"{'no' if result['cancel_clean'] else 'SAW'} writes after "
          f"confirmation)")
    return 0 if ok else 1


# ---------------------------------------------------------------- wtransfer


def _wt_topology(ns: dict[str, Any]) -> tuple[dict[int, list[ParamMeta]],
                                              dict[int, list[ParamMeta]]]:
    """Deterministic parameter placement from the seed alone, so every
    process can rebuild the identical schedule without exchanging it."""
    import random
    rng = random.Random(ns["seed"])
    T, I = ns["train"], ns["infer"]
    train: dict[int, list[ParamMeta]] = {r: [] for r in range(T)}
    infer: dict[int, list[ParamMeta]] = {q: [] for q in range(I)}
    fp8_every = ns["fp8_every"]
    for i in range(ns["params"]):
        name = f"p{i:03d}"
        shape = (T * I * rng.choice((1, 2, 4)), ns["cols"])
        dtype = DT_FP8 if fp8_every and i % fp8_every == fp8_every - 1 \
            else DT_BF16
        group = i % 2
        offload = i % 5 == 4
        if i % 3 == 0 or T == 1:
            owner = rng.randrange(T)
            train[owner].append(ParamMeta(name, shape, dtype, group=group,
                                          offload=offload))
        else:
            for r in range(T):
                train[r].append(ParamMeta(name, shape, dtype, group=group,
                                          shard_index=r, shard_count=T,
                                          offload=offload))
        if i % 2 == 0 or I == 1:
            for q in range(I):
                infer[q].append(ParamMeta(name, shape, dtype, group=group))
        else:
            for q in range(I):
                infer[q].append(ParamMeta(name, shape, dtype, group=group,
                                          shard_index=q, shard_count=I))
    return train, infer


def _wt_verify(regions: dict[int, np.ndarray], sched: Any,
               store: Any) -> tuple[int, int]:
    checked = bad = 0
    for task in sched.tasks:
        want = prepare(task, store)
        for rank, _desc, off in task.dsts:
            if rank not in regions:
                continue
            checked += 1
            if bytes(regions[rank][off:off + task.nbytes]) != want:
                bad += 1
    return checked, bad


def _wt_report(ns: dict[str, Any], sched: Any, report: Any,
               checked: int, bad: int) -> dict[str, Any]:
    peaks = report.peak_temp_by_rank
    return {
        "transport": ns["transport"],
        "tasks": len(sched.tasks),
        "destinations": checked,
        "bad_destinations": bad,
        "verified_ok": bad == 0,
        "wall_s": round(report.wall_s, 6),
        "bytes_by_rank": {str(r): v for r, v in
                          sorted(report.bytes_by_rank.items())},
        "tasks_by_rank": {str(r): v for r, v in
                          sorted(report.tasks_by_rank.items())},
        "peak_temp_by_rank": {str(r): v for r, v in sorted(peaks.items())},
        "watermark": ns["watermark"],
        "watermark_ok": all(v <= ns["watermark"] for v in peaks.values()),
    }


def _wt_stage_times(ns: dict[str, Any]) -> StageTimes:
    s = ns["stage_ms"] / 1e3
    return StageTimes(h2d_s=s, prepare_s=s, write_s=s)


def _wt_run_sim(ns: dict[str, Any]) -> dict[str, Any]:
    train, infer = _wt_topology(ns)
    fabric = SimFabric(FaultConfig(seed=ns["seed"], reorder=ns["reorder"]))
    senders = {r: TransferEngine(fabric, rails=ns["rails"], name=f"wt{r}")
               for r in train}
    receivers = {q: TransferEngine(fabric, rails=ns["rails"], name=f"wi{q}")
                 for q in infer}
    regions: dict[int, np.ndarray] = {}
    descs = {}
    for q, metas in infer.items():
        total, _ = infer_layout(metas)
        buf = np.zeros(total, dtype=np.uint8)
        _, desc = receivers[q].reg_mr(buf)
        regions[q] = buf
        descs[q] = desc
    sched = build_schedule(train, infer, rank_descs=descs)
    if ns["schedule"]:
        dump_schedule(sched, ns["schedule"])
    store = fill_store(train, ns["seed"])
    try:
        report = run_step(senders, sched, store, watermark=ns["watermark"],
                          times=_wt_stage_times(ns))
        checked, bad = _wt_verify(regions, sched, store)
    finally:
        if ns["trace"]:
            for r, eng in senders.items():
                eng.trace.dump_path(f"{ns['trace']}.t{r}.jsonl")
            for q, eng in receivers.items():
                eng.trace.dump_path(f"{ns['trace']}.i{q}.jsonl")
        for eng in (*senders.values(), *receivers.values()):
            eng.close()
    return _wt_report(ns, sched, report, checked, bad)


def _wt_proc(rank: int, port: int, port_q: Any, res_q: Any,
             ns: dict[str, Any]) -> None:
    """One weight-transfer process: ranks below --train send, the rest
    receive.  The schedule is rebuilt locally; only region descriptors and
    results travel through the rendezvous."""
    try:
        T, I = ns["train"], ns["infer"]
        world = T + I
        cb = port_q.put if rank == 0 else None
        rdv = Rendezvous(rank, world, port=port, timeout=60.0, ready_cb=cb)
        train, infer = _wt_topology(ns)
        fabric = UdpFabric()
        role = "wt" if rank < T else "wi"
        eng = TransferEngine(fabric, rails=ns["rails"],
                             name=f"{role}{rank}")
        regions: dict[int, np.ndarray] = {}
        mine = b""
        if rank >= T:
            q = rank - T
            total, _ = infer_layout(infer[q])
            buf = np.zeros(total, dtype=np.uint8)
            _, desc = eng.reg_mr(buf)
            regions[q] = buf
            mine = encode_mrdesc(desc)
        blobs = rdv.allgather(mine)
        descs = {r - T: decode_mrdesc(blobs[r]) for r in range(T, world)}
        sched = build_schedule(train, infer, rank_descs=descs)
        store = fill_store(train, ns["seed"])
        if rank < T:
            report = run_step({rank: eng}, sched, store,
                              watermark=ns["watermark"],
                              times=_wt_stage_times(ns),
                              final_barrier=rdv.barrier)
            out = {
                "wall_s": round(report.wall_s, 6),
                "bytes": report.bytes_by_rank.get(rank, 0),
                "tasks": report.tasks_by_rank.get(rank, 0),
                "peak_temp": report.peak_temp_by_rank.get(rank, 0),
            }
        else:
            rdv.barrier()
            checked, bad = _wt_verify(regions, sched, store)
            out = {"checked": checked, "bad": bad}
        rdv.barrier()
        if ns["trace"]:
            eng.trace.dump_path(f"{ns['trace']}.{role}{rank}.jsonl")
        res_q.put((rank, out))
        eng.close()
        rdv.close()
    except Exception as exc:
        res_q.put((rank, {"error": f"{type(exc).__name__}: {exc}"}))


def _wt_run_socket(ns: dict[str, Any]) -> dict[str, Any]:
    T, I = ns["train"], ns["infer"]
    world = T + I
    ctx = mp.get_context("spawn")
    port_q = ctx.Queue()
    res_q = ctx.Queue()
    procs = [ctx.Process(target=_wt_proc, args=(0, 0, port_q, res_q, ns),
                         daemon=True)]
    procs[0].start()
    port = port_q.get(timeout=30.0)
    for rank in range(1, world):
        proc = ctx.Process(target=_wt_proc,
                           args=(rank, port, port_q, res_q, ns), daemon=True)
        proc.start()
        procs.append(proc)
    got = dict(res_q.get(timeout=_RESULT_TIMEOUT_S) for _ in range(world))
    for proc in procs:
        proc.join(30.0)
    for rank in range(world):
        if "error" in got.get(rank, {}):
            raise ProtocolError(f"rank {rank}: {got[rank]['error']}")

    train, infer = _wt_topology(ns)
    sched = build_schedule(train, infer)
    if ns["schedule"]:
        dump_schedule(sched, ns["schedule"])
    checked = sum(got[r]["checked"] for r in range(T, world))
    bad = sum(got[r]["bad"] for r in range(T, world))
    peaks = {r: got[r]["peak_temp"] for r in range(T)}
    return {
        "transport": "socket",
        "tasks": len(sched.tasks),
        "destinations": checked,
        "bad_destinations": bad,
        "verified_ok": bad == 0,
        "wall_s": max(got[r]["wall_s"] for r in range(T)),
        "bytes_by_rank": {str(r): got[r]["bytes"] for r in range(T)},
        "tasks_by_rank": {str(r): got[r]["tasks"] for r in range(T)},
        "peak_temp_by_rank": {str(r): v for r, v in sorted(peaks.items())},
        "watermark": ns["watermark"],
        "watermark_ok": all(v <= ns["watermark"] for v in peaks.values()),
    }


def wtransfer_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(
        prog="wtransfer",
        description="Publish one step of training weights to inference "
                    "ranks and verify every destination byte-for-byte.")
    _fabric_args(p)
    p.add_argument("--train", type=int, default=2,
                   help="training (sender) ranks")
    p.add_argument("--infer", type=int, default=2,
                   help="inference (receiver) ranks")
    p.add_argument("--params", type=int, default=12)
    p.add_argument("--cols", type=int, default=256)
    p.add_argument("--fp8-every", type=int, default=3,
                   help="every N-th parameter quantizes to fp8 (0 = none)")
    p.add_argument("--watermark", type=int, default=8 << 20,
                   help="per-rank staging byte cap")
    p.add_argument("--stage-ms", type=float, default=0.0,
                   help="simulated per-stage latency to expose overlap")
    p.add_argument("--schedule", default=None,
                   help="also dump the schedule as JSON lines")
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None)
    args = p.parse_args(argv)
    ns = vars(args)

    try:
        result = _wt_run_sim(ns) if args.transport == "sim" \
            else _wt_run_socket(ns)
    except Exception as exc:
        print(f"wtransfer failed: {exc}", file=sys.stderr)
        return 1
    _write_json(args.out, result)

    print(f"wtransfer: transport={result['transport']} "
          f"train={args.train} infer={args.infer} "
          f"tasks={result['tasks']} wall={result['wall_s'] * 1e3:.1f}ms")
    print(f"  coverage   "
          f"{'ok' if result['verified_ok'] else 'FAILED'} "
          f"({result['destinations'] - result['bad_destinations']}/"
          f"{result['destinations']} destinations byte-identical)")
    peak = max(result["peak_temp_by_rank"].values(), default=0)
    print(f"  watermark  "
          f"{'ok' if result['watermark_ok'] else 'EXCEEDED'} "
          f"(peak staging {peak} of {result['watermark']} bytes)")
    return 0 if result["verified_ok"] and result["watermark_ok"] else 1


# ----------------------------------------------------------------- moebench


def moebench_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(
        prog="moebench",
        description="MoE dispatch/combine latency on the simulated fabric, "
                    "optionally sweeping the private-token threshold.")
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--private-tokens", type=int, default=None)
    p.add_argument("--sweep", type=_ints, default=(),
                   help="comma-separated private-token settings to compare")
    p.add_argument("--ranks-per-node", type=int, default=1)
    p.add_argument("--rails", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--rate-gbps", type=float, default=2.0)
    p.add_argument("--lat-us", type=_floats, default=(20.0, 40.0),
                   metavar="MIN,MAX")
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None,
                   help="dump per-rank traces of the main run")
    args = p.parse_args(argv)

    cfg = MoeBenchConfig(
        ranks=args.ranks, experts=args.experts, tokens=args.tokens,
        topk=args.topk, hidden=args.hidden,
        private_tokens=args.private_tokens,
        ranks_per_node=args.ranks_per_node, rails=args.rails,
        seed=args.seed, warmup=args.warmup, iters=args.iters,
        rate_gbps=args.rate_gbps, lat_min_us=args.lat_us[0],
        lat_max_us=args.lat_us[-1], sweep=tuple(args.sweep))
    try:
        report = bench_moe(cfg, trace_path=args.trace)
    except Exception as exc:
        print(f"moebench failed: {exc}", file=sys.stderr)
        return 1
    _write_json(args.out, report)

    print(f"moebench: ranks={args.ranks} experts={args.experts} "
          f"tokens={args.tokens} topk={args.topk} "
          f"private={report['private_tokens']} rails={args.rails} "
          f"iters={args.iters}")
    cols = ("phase", "mean", "p01", "p25", "p50", "p75", "p95", "p99")
    rows = []
    for phase, st in report["phases"].items():
        rows.append((phase, *[f"{st[c]:.1f}" for c in cols[1:]]))
    print(_table(cols, rows))
    if report.get("sweep"):
        print(_table(("private_tokens", "median_dispatch_us"),
                     [(e["private_tokens"], f"{e['median_dispatch_us']:.1f}")
                      for e in report["sweep"]]))
    return 0


# ---------------------------------------------------------------- railbench


def railbench_main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(
        prog="railbench",
        description="Raw transfer throughput on the simulated fabric and "
                    "packing/quantization kernel timings.")
    p.add_argument("what", choices=("p2p", "kernels", "all"))
    p.add_argument("--rails", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate-gbps", type=float, default=10.0)
    p.add_argument("--msg-sizes", type=_ints,
                   default=P2pConfig().msg_sizes)
    p.add_argument("--page-sizes", type=_ints,
                   default=P2pConfig().page_sizes)
    p.add_argument("--repeats", type=int, default=4)
    p.add_argument("--out", default=None)
    args = p.parse_args(argv)

    report: dict[str, Any] = {}
    if args.what in ("p2p", "all"):
        cfg = P2pConfig(rails=args.rails, seed=args.seed,
                        rate_gbps=args.rate_gbps,
                        msg_sizes=tuple(args.msg_sizes),
                        page_sizes=tuple(args.page_sizes),
                        repeats=args.repeats)
        p2p = bench_p2p(cfg)
        report["p2p"] = p2p
        print(f"railbench p2p: rails={args.rails} "
              f"line rate {p2p['line_rate_gbps']:.1f} Gbps")
        rows = [(f"{e['bytes']}B", f"{e['gbps']:.2f}",
                 f"{e['fraction']:.2f}") for e in p2p["single"]]
        print(_table(("single write", "Gbps", "of line"), rows))
        rows = [(f"{e['page_bytes']}B pages", f"{e['gbps']:.2f}",
                 f"{e['fraction']:.2f}") for e in p2p["paged"]]
        print(_table(("paged write", "Gbps", "of line"), rows))
    if args.what in ("kernels", "all"):
        kcfg = KernelBenchConfig(seed=args.seed, repeats=args.repeats)
        kern = bench_kernels(kcfg)
        report["kernels"] = kern
        print(f"railbench kernels: active={kern['active']}")
        names = sorted(next(iter(kern["impl"].values())))
        rows = []
        for name in names:
            row = [name] + [f"{kern['impl'][i][name]:.1f}"
                            for i in kern["impl"]]
            rows.append(row)
        print(_table(("kernel", *[f"{i} us" for i in kern["impl"]]), rows))
    _write_json(args.out, report)
    return 0


if __name__ == "__main__":
    sys.exit(railbench_main())
