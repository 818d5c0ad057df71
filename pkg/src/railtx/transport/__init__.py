"""Rail transports: simulated fabric and UDP socket backend."""

from .base import (Completion, FaultConfig, ImmReceived, MsgReceived, Rail,
                   SendDone, fragment_ranges, stable_u01, MAX_WR_LEN)
from .sim import SimFabric, SimRail

__all__ = [
    "Completion", "FaultConfig", "ImmReceived", "MsgReceived", "Rail",
    "SendDone", "SimFabric", "SimRail", "fragment_ranges", "stable_u01",
    "MAX_WR_LEN",
]
