"""Benchmark harnesses.

Transfer benchmarks run on the simulated fabric's virtual clock, so the
numbers are deterministic for a fixed seed and independent of host load.
The kernels comparison is the one wall-clock benchmark: it times the JIT
and pure-numpy implementations of the same hot loops against each other.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .engine import TransferEngine
from .moe import PrivateBufferConfig, RoutingSpec, build_mesh, encode_tokens
from .transport import FaultConfig, SimFabric
from .wire import Pages

KIB = 1 << 10
MIB = 1 << 20

_PCTS = (1, 25, 50, 75, 95, 99)


def _stats(xs: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(list(xs), dtype=np.float64)
    out = {"mean": float(arr.mean()), "n": int(arr.size)}
    for p in _PCTS:
        out[f"p{p:02d}"] = float(np.percentile(arr, p))
    return out


# ------------------------------------------------------------ point-to-point


@dataclass(frozen=True)
class P2pConfig:
    rails: int = 2
    seed: int = 0
    rate_gbps: float = 10.0
    msg_sizes: tuple[int, ...] = (64 * KIB, 256 * KIB, MIB, 32 * MIB)
    page_sizes: tuple[int, ...] = (KIB, 8 * KIB, 16 * KIB, 64 * KIB)
    repeats: int = 4
    paged_total: int = 4 * MIB


def _measure(cfg: P2pConfig, nbytes: int,
             submit: Callable[..., object]) -> float:
    """Chained-repeat throughput in Gbps on a fresh fabric.

    Each measurement gets its own fabric so one size's rail occupancy
    cannot leak into the next span.
    """
    fab = SimFabric(FaultConfig(seed=cfg.seed, rate_gbps=cfg.rate_gbps))
    a = TransferEngine(fab, rails=cfg.rails, name="bsrc")
    b = TransferEngine(fab, rails=cfg.rails, name="bdst")
    src = bytearray(nbytes)
    dst = bytearray(nbytes)
    handle, _ = a.reg_mr(src)
    _, desc = b.reg_mr(dst)
    t = 0.0
    for _ in range(cfg.repeats):
        t = submit(a, handle, desc, t).result(120.0)
    a.close()
    b.close()
    return cfg.repeats * nbytes * 8.0 / (t * 1000.0)  # vtime is microseconds


def bench_p2p(cfg: P2pConfig = P2pConfig()) -> dict:
    """Single and paged write throughput against the configured line rate."""
    line = cfg.rate_gbps * cfg.rails
    report: dict = {"line_rate_gbps": line, "rails": cfg.rails,
                    "rate_gbps_per_rail": cfg.rate_gbps,
                    "single": [], "paged": []}
    for size in cfg.msg_sizes:
        thr = _measure(cfg, size, lambda a, h, d, t, size=size:
                       a.submit_single_write(size, (h, 0), (d, 0),
                                             not_before=t,
                                             label="bench.single"))
        report["single"].append({"bytes": size, "gbps": thr,
                                 "fraction": thr / line})
    for page in cfg.page_sizes:
        n = cfg.paged_total // page
        pages = Pages(indices=tuple(range(n)), stride=page)
        thr = _measure(cfg, cfg.paged_total, lambda a, h, d, t, page=page,
                       pages=pages:
                       a.submit_paged_writes(page, (h, pages), (d, pages),
                                             not_before=t,
                                             label="bench.paged"))
        report["paged"].append({"page_bytes": page, "gbps": thr,
                                "fraction": thr / line})
    report["single_peak_gbps"] = max(r["gbps"] for r in report["single"])
    return report


# --------------------------------------------------------------------- moe


@dataclass(frozen=True)
class MoeBenchConfig:
    ranks: int = 4
    experts: int = 8
    tokens: int = 16
    topk: int = 2
    hidden: int = 256
    elem_size: int = 1
    scales: int = 8
    private_tokens: int | None = None
    ranks_per_node: int = 1
    rails: int = 1
    seed: int = 0
    warmup: int = 100
    iters: int = 1000
    rate_gbps: float = 2.0
    lat_min_us: float = 20.0
    lat_max_us: float = 40.0
    sweep: tuple[int, ...] = ()


def _run_moe(cfg: MoeBenchConfig, private: int, warmup: int, iters: int,
             trace_path: str | None = None,
             ) -> tuple[dict[str, dict[str, float]], int]:
    spec = RoutingSpec(ranks=cfg.ranks, experts=cfg.experts,
                       max_tokens=cfg.tokens, topk=cfg.topk,
                       hidden=cfg.hidden, elem_size=cfg.elem_size,
                       scales=cfg.scales)
    fab = SimFabric(FaultConfig(seed=cfg.seed, rate_gbps=cfg.rate_gbps,
                                lat_min_us=cfg.lat_min_us,
                                lat_max_us=cfg.lat_max_us))
    engines = [TransferEngine(fab, rails=cfg.rails, name=f"m{r}")
               for r in range(cfg.ranks)]
    mesh = build_mesh(engines, spec, private=PrivateBufferConfig(private),
                      ranks_per_node=cfg.ranks_per_node)
    total = warmup + iters
    errs: list[Exception] = []

    def drive(r: int) -> None:
        rng = np.random.default_rng((cfg.seed << 8) + r)
        rank = mesh[r]
        payload = encode_tokens(spec, rng.standard_normal(
            (cfg.tokens, cfg.hidden)).astype(np.float32))
        weights = np.full((cfg.tokens, cfg.topk), 1.0 / cfg.topk, np.float32)
        try:
            for _ in range(total):
                routes = np.array(
                    [rng.choice(cfg.experts, size=cfg.topk, replace=False)
                     for _ in range(cfg.tokens)], np.int64)
                rank.dispatch_send(payload, routes)
                grouped = rank.dispatch_recv(timeout=60.0)
                rank.combine_send(grouped.data)
                rank.combine_recv(weights, timeout=60.0)
        except Exception as e:  # noqa: BLE001
            errs.append(e)

    import threading
    threads = [threading.Thread(target=drive, args=(r,), daemon=True)
               for r in range(cfg.ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errs:
        raise errs[0]
    dispatch, combine, tot = [], [], []
    for rank in mesh:
        for s in rank.step_stats[warmup:]:
            dispatch.append(s.dispatch_us)
            combine.append(s.combine_us)
            tot.append(s.total_us)
    writes = sum(len(e.trace.events("wr_post")) for e in engines)
    for rank in mesh:
        rank.close()
    if trace_path:
        stem, dot, ext = trace_path.rpartition(".")
        for r, e in enumerate(engines):
            path = trace_path if r == 0 else (
                f"{stem}.r{r}{dot}{ext}" if dot else f"{trace_path}.r{r}")
            e.trace.dump_path(path)
    for e in engines:
        e.close()
    phases = {"dispatch_us": _stats(dispatch), "combine_us": _stats(combine),
              "total_us": _stats(tot)}
    return phases, writes


def bench_moe(cfg: MoeBenchConfig = MoeBenchConfig(),
              trace_path: str | None = None) -> dict:
    """Per-phase latency percentiles plus an optional private-buffer sweep."""
    base_p = cfg.tokens if cfg.private_tokens is None else cfg.private_tokens
    phases, writes = _run_moe(cfg, base_p, cfg.warmup, cfg.iters, trace_path)
    report: dict = {"config": asdict(cfg), "private_tokens": base_p,
                    "phases": phases, "network_writes": writes}
    if cfg.sweep:
        sweep = []
        for p in cfg.sweep:
            ph, _ = _run_moe(cfg, p, max(cfg.warmup // 5, 2),
                             max(cfg.iters // 5, 10))
            sweep.append({"private_tokens": p,
                          "median_dispatch_us": ph["dispatch_us"]["p50"]})
        report["sweep"] = sweep
    return report


# ----------------------------------------------------------------- kernels


@dataclass(frozen=True)
class KernelBenchConfig:
    elements: int = 1 << 16
    rows: int = 2048
    width: int = 288
    tokens: int = 512
    topk: int = 4
    repeats: int = 5
    seed: int = 0


def bench_kernels(cfg: KernelBenchConfig = KernelBenchConfig()) -> dict:
    """Wall-clock comparison of the JIT kernels against the numpy fallback."""
    rng = np.random.default_rng(cfg.seed)
    x = (rng.standard_normal(cfg.elements) * 8).astype(np.float32)
    q = rng.integers(0, 256, cfg.elements, dtype=np.uint8)
    mat = rng.integers(0, 256, (cfg.rows, cfg.width), dtype=np.uint8)
    gather = rng.integers(0, cfg.rows, cfg.rows * 2, dtype=np.int64)
    y = rng.standard_normal((cfg.rows, cfg.width)).astype(np.float32)
    rows = rng.integers(0, cfg.rows, (cfg.tokens, cfg.topk), dtype=np.int64)
    w = rng.random((cfg.tokens, cfg.topk)).astype(np.float32)

    def best(fn: Callable[[], object]) -> float:
        fn()  # includes any JIT compilation outside the timed runs
        t = float("inf")
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            fn()
            t = min(t, time.perf_counter() - t0)
        return t * 1e6

    report: dict = {"active": "numba" if kernels.USING_NUMBA else "numpy",
                    "elements": cfg.elements, "impl": {}}
    for name, impl in kernels.implementations().items():
        report["impl"][name] = {
            "fp8_encode_us": best(lambda: impl["fp8_encode"](x)),
            "fp8_decode_us": best(lambda: impl["fp8_decode"](q)),
            "bf16_encode_us": best(lambda: impl["bf16_encode"](x)),
            "pack_rows_us": best(lambda: impl["pack_rows"](mat, gather)),
            "weighted_combine_us": best(
                lambda: impl["weighted_combine"](y, rows, w)),
        }
    if "numba" in report["impl"]:
        speed = {}
        for key, numba_us in report["impl"]["numba"].items():
            np_us = report["impl"]["numpy"][key]
            speed[key] = np_us / numba_us if numba_us > 0 else float("inf")
        report["speedup"] = speed
    return report
