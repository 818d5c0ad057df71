"""railtx: point-to-point transfer engine over reliable-but-unordered rails.

One-sided writes with immediate-value completion counting, multi-rail
sharding, a fault-injecting simulated fabric plus a UDP backend, and three
protocols built on top: paged KV-cache transfer, pipelined weight transfer,
and MoE token dispatch/combine.
"""

from .engine import (CompletionFlag, ImmCounterTable, ImmFlag, TransferEngine,
                     Watcher, SPLIT_THRESHOLD)
from .errors import (ProtocolError, RailtxError, RegionError, ScheduleError,
                     TransferError, WireError)
from .transport import FaultConfig, SimFabric
from .wire import MrDesc, MrHandle, NetAddr, Pages, ScatterDst

__version__ = "0.1.0"

__all__ = [
    "CompletionFlag", "FaultConfig", "ImmCounterTable", "ImmFlag", "MrDesc",
    "MrHandle", "NetAddr", "Pages", "ProtocolError", "RailtxError",
    "RegionError", "ScatterDst", "ScheduleError", "SimFabric",
    "SPLIT_THRESHOLD", "TransferEngine", "TransferError", "Watcher",
    "WireError",
]
