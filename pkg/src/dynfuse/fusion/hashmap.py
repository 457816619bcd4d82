"""Open-addressed spatial hash from integer block coordinates to payloads.

Linear probing with tombstones; the table resizes at 60% occupancy.  A single
lock serializes every public operation: with one writer and many readers the
map therefore never exposes a torn entry, matching the block-atomicity
contract of the fusion model.
"""

from __future__ import annotations

import threading
from typing import Iterator

_EMPTY = None
_TOMBSTONE = object()

# classic large primes for 3D coordinate hashing
_P1, _P2, _P3 = 73856093, 19349669, 83492791


def coord_hash(coord: tuple[int, int, int]) -> int:
    x, y, z = coord
    return (x * _P1) ^ (y * _P2) ^ (z * _P3)


class SpatialHashMap:
    def __init__(self, capacity: int = 1024):
        cap = 8
        while cap < capacity:
            cap *= 2
        self._keys: list = [_EMPTY] * cap
        self._values: list = [None] * cap
        self._size = 0
        self._used = 0  # live + tombstones
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return self._size

    def _probe(self, keys, coord, cap):
        """Yields slot indices along the probe sequence."""
        i = coord_hash(coord) & (cap - 1)
        while True:
            yield i
            i = (i + 1) & (cap - 1)

    def _find(self, coord):
        """Returns (slot of live entry or None, first insertable slot)."""
        cap = len(self._keys)
        insert_at = None
        for i in self._probe(self._keys, coord, cap):
            key = self._keys[i]
            if key is _EMPTY:
                return None, insert_at if insert_at is not None else i
            if key is _TOMBSTONE:
                if insert_at is None:
                    insert_at = i
                continue
            if key == coord:
                return i, i
        raise AssertionError("unreachable: table always keeps empty slots")

    def _grow(self):
        old_keys, old_values = self._keys, self._values
        cap = len(old_keys) * 2
        self._keys = [_EMPTY] * cap
        self._values = [None] * cap
        self._size = 0
        self._used = 0
        for key, value in zip(old_keys, old_values):
            if key is _EMPTY or key is _TOMBSTONE:
                continue
            _, slot = self._find(key)
            self._keys[slot] = key
            self._values[slot] = value
            self._size += 1
            self._used += 1

    def put(self, coord: tuple[int, int, int], value) -> None:
        with self._lock:
            live, slot = self._find(coord)
            if live is not None:
                self._values[live] = value
                return
            if self._keys[slot] is _EMPTY:
                self._used += 1
            self._keys[slot] = coord
            self._values[slot] = value
            self._size += 1
            if self._used * 10 >= len(self._keys) * 6:
                self._grow()

    def get(self, coord: tuple[int, int, int], default=None):
        with self._lock:
            live, _ = self._find(coord)
            return self._values[live] if live is not None else default

    def __contains__(self, coord) -> bool:
        with self._lock:
            live, _ = self._find(coord)
            return live is not None

    def remove(self, coord: tuple[int, int, int]) -> bool:
        """Deletes an entry; returns whether it existed (idempotent)."""
        with self._lock:
            live, _ = self._find(coord)
            if live is None:
                return False
            self._keys[live] = _TOMBSTONE
            self._values[live] = None
            self._size -= 1
            return True

    def setdefault(self, coord: tuple[int, int, int], factory):
        """Returns the existing value or inserts factory() atomically."""
        with self._lock:
            live, slot = self._find(coord)
            if live is not None:
                return self._values[live], False
            value = factory()
            if self._keys[slot] is _EMPTY:
                self._used += 1
            self._keys[slot] = coord
            self._values[slot] = value
            self._size += 1
            if self._used * 10 >= len(self._keys) * 6:
                self._grow()
            return value, True

    def keys(self) -> list[tuple[int, int, int]]:
        with self._lock:
            return [k for k in self._keys
                    if k is not _EMPTY and k is not _TOMBSTONE]

    def items(self) -> Iterator[tuple[tuple[int, int, int], object]]:
        with self._lock:
            return iter([
                (k, v) for k, v in zip(self._keys, self._values)
                if k is not _EMPTY and k is not _TOMBSTONE
            ])
