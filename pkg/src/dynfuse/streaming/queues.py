"""Per-connection send scheduling: reliable, ordered bulk plus latest-wins
realtime slots.

Mesh-affecting packets (TSDF, MC, block removal) are queued reliably and
never dropped; dynamic frames and poses occupy depth-1 slots where a newer
item silently replaces an unsent older one.  A reliable backlog beyond the
hard cap marks the connection stalled.
"""

from __future__ import annotations

import threading
from collections import deque

from ..protocol import PacketType

LATEST_TYPES = (PacketType.DYN_FRAME, PacketType.POSE)


class ConnectionStalled(RuntimeError):
    pass


class SendQueues:
    def __init__(self, reliable_cap: int = 50000,
                 realtime_reliable: bool = False):
        self._reliable: deque = deque()
        self._latest: dict[int, bytes] = {}
        self._latest_order: deque = deque()
        self._cap = reliable_cap
        self._realtime_reliable = realtime_reliable
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._closed = False

    def offer(self, ptype: int, framed: bytes) -> None:
        """Queues one framed packet according to its type's policy."""
        with self._ready:
            if ptype in LATEST_TYPES and not self._realtime_reliable:
                if ptype not in self._latest:
                    self._latest_order.append(ptype)
                self._latest[ptype] = framed
            else:
                if len(self._reliable) >= self._cap:
                    raise ConnectionStalled(
                        f"reliable backlog over {self._cap} packets")
                self._reliable.append(framed)
            self._ready.notify()

    def next_packet(self, timeout: float | None = None) -> bytes | None:
        """Blocks for the next packet; realtime slots are served first.

        Returns None on timeout or once closed and drained.
        """
        with self._ready:
            while True:
                if self._latest_order:
                    ptype = self._latest_order.popleft()
                    return self._latest.pop(ptype)
                if self._reliable:
                    return self._reliable.popleft()
                if self._closed:
                    return None
                if not self._ready.wait(timeout):
                    return None

    def close(self) -> None:
        with self._ready:
            self._closed = True
            self._ready.notify_all()

    def pending(self) -> int:
        with self._lock:
            return len(self._reliable) + len(self._latest)

    def wait_drained(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else timeout
        import time
        start = time.monotonic()
        while self.pending():
            if deadline is not None and time.monotonic() - start > deadline:
                return False
            time.sleep(0.002)
        return True
