"""Shared fabric configurations and engine lifecycle helpers."""

from __future__ import annotations

import contextlib
from dataclasses import replace
from typing import Iterator

from railtx import FaultConfig, SimFabric, TransferEngine

# Delivery disciplines every invariant must survive: in-order, windowed
# random reorder, adversarial reverse, and 4 KiB fragmentation combined
# with reorder. The first three raise the MTU above any test payload so
# whole WRs are the reordering unit; the last splits 64 KiB pages 16 ways.
FABRIC_MODES: dict[str, FaultConfig] = {
    "inorder": FaultConfig(reorder="none", mtu=1 << 20),
    "window": FaultConfig(reorder="random", window=16, mtu=1 << 20),
    "reverse": FaultConfig(reorder="reverse", window=16, mtu=1 << 20),
    "mtu4k": FaultConfig(reorder="random", window=16, mtu=4096),
}

SEEDS = (1, 2, 3)


def mode_config(mode: str, seed: int) -> FaultConfig:
    return replace(FABRIC_MODES[mode], seed=seed)


def all_mode_configs() -> list[tuple[str, FaultConfig]]:
    return [(f"{mode}-s{seed}", mode_config(mode, seed))
            for mode in FABRIC_MODES for seed in SEEDS]


@contextlib.contextmanager
def engines(cfg: FaultConfig, n: int, rails: int = 2,
            prefix: str = "e") -> Iterator[list[TransferEngine]]:
    fabric = SimFabric(cfg)
    es = [TransferEngine(fabric, rails=rails, name=f"{prefix}{i}")
          for i in range(n)]
    try:
        yield es
    finally:
        for e in es:
            e.close()


@contextlib.contextmanager
def engine_pair(cfg: FaultConfig, rails: int = 2,
                ) -> Iterator[tuple[TransferEngine, TransferEngine]]:
    with engines(cfg, 2, rails=rails) as (a, b):
        yield a, b
