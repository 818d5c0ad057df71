"""TCP rendezvous for multi-process runs.

Rank 0 listens; other ranks connect and keep the connection for the whole
session.  Rounds are lockstep: every rank calls allgather the same number
of times with its own payload and receives the rank-ordered list of all
payloads.  barrier() is an empty allgather.
"""

from __future__ import annotations

import socket
import struct
import time
from typing import Callable

from .errors import ProtocolError

_HDR = struct.Struct("<II")  # rank, payload length


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("rendezvous peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def _send_frame(sock: socket.socket, rank: int, payload: bytes) -> None:
    sock.sendall(_HDR.pack(rank, len(payload)) + payload)


def _recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    rank, ln = _HDR.unpack(_recv_exact(sock, _HDR.size))
    return rank, _recv_exact(sock, ln)


class Rendezvous:
    """Gather/broadcast hub over one TCP port; rank 0 is the hub."""

    def __init__(self, rank: int, world: int, host: str = "127.0.0.1",
                 port: int = 29500, timeout: float = 30.0,
                 ready_cb: Callable[[int], None] | None = None) -> None:
        if not 0 <= rank < world:
            raise ProtocolError(f"rank {rank} outside world of {world}")
        self.rank = rank
        self.world = world
        self.port = port
        self._timeout = timeout
        self._conns: dict[int, socket.socket] = {}
        self._sock: socket.socket | None = None
        if world == 1:
            return
        if rank == 0:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, port))
            # port 0 lets the OS pick; ready_cb runs before the blocking
            # accepts so the hub can publish the chosen port out of band
            self.port = srv.getsockname()[1]
            srv.listen(world)
            if ready_cb is not None:
                ready_cb(self.port)
            srv.settimeout(timeout)
            self._srv = srv
            try:
                for _ in range(world - 1):
                    conn, _addr = srv.accept()
                    conn.settimeout(timeout)
                    r, _ = _recv_frame(conn)
                    if r in self._conns or not 0 < r < world:
                        raise ProtocolError(f"duplicate or bad rank {r}")
                    self._conns[r] = conn
            except socket.timeout as e:
                raise ProtocolError("rendezvous accept timed out") from e
        else:
            deadline = time.monotonic() + timeout
            last: Exception | None = None
            while time.monotonic() < deadline:
                try:
                    s = socket.create_connection((host, port), timeout=1.0)
                    break
                except OSError as e:
                    last = e
                    time.sleep(0.05)
            else:
                raise ProtocolError(f"cannot reach rendezvous: {last}")
            s.settimeout(timeout)
            self._sock = s
            _send_frame(s, rank, b"")  # hello identifies the rank

    def allgather(self, payload: bytes) -> list[bytes]:
        if self.world == 1:
            return [payload]
        if self.rank == 0:
            parts: list[bytes | None] = [None] * self.world
            parts[0] = payload
            try:
                for r, conn in self._conns.items():
                    rr, data = _recv_frame(conn)
                    if rr != r:
                        raise ProtocolError(f"rank mismatch {rr} != {r}")
                    parts[r] = data
            except socket.timeout as e:
                raise ProtocolError("rendezvous gather timed out") from e
            blob = b"".join(_HDR.pack(r, len(p)) + p
                            for r, p in enumerate(parts))  # type: ignore[arg-type]
            for conn in self._conns.values():
                _send_frame(conn, 0, blob)
            return parts  # type: ignore[return-value]
        assert self._sock is not None
        try:
            _send_frame(self._sock, self.rank, payload)
            _, blob = _recv_frame(self._sock)
        except socket.timeout as e:
            raise ProtocolError("rendezvous gather timed out") from e
        out: list[bytes] = []
        off = 0
        for _ in range(self.world):
            _, ln = _HDR.unpack_from(blob, off)
            off += _HDR.size
            out.append(blob[off:off + ln])
            off += ln
        return out

    def barrier(self) -> None:
        self.allgather(b"")

    def close(self) -> None:
        for conn in self._conns.values():
            conn.close()
        self._conns.clear()
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        srv = getattr(self, "_srv", None)
        if srv is not None:
            srv.close()
