"""Exception types raised across the package."""


class RailtxError(Exception):
    """Base class for all errors raised by this package."""


class WireError(RailtxError):
    """Malformed, truncated or trailing-garbage byte input."""


class RegionError(RailtxError):
    """Invalid memory-region registration or out-of-bounds access."""


class TransferError(RailtxError):
    """Invalid transfer submission (bad bounds, lengths, peers)."""


class ProtocolError(RailtxError):
    """Protocol-level failure in kvcache / weights / moe state machines."""


class ScheduleError(RailtxError):
    """Weight-transfer schedule construction failure."""
