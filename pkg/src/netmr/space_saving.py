"""Space-Saving heavy-hitter summary.

Keeps at most k counters. Any item whose true frequency exceeds N/k (N =
total observations) is guaranteed to be present, and per-item estimates
never underestimate the true count. With fewer than k distinct items the
structure degenerates to exact counting (max_error stays 0).

Byte totals ride along with the packet counter: on eviction the newcomer
inherits the victim's bytes as well, preserving the no-underestimate
property for bytes in the same way.
"""

from __future__ import annotations


class SpaceSaving:
    __slots__ = ("capacity", "total", "_entries")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.total = 0
        self._entries: dict = {}  # item -> [count, error, bytes]

    def update(self, item, size_bytes: int = 0):
        self.total += 1
        entries = self._entries
        cell = entries.get(item)
        if cell is not None:
            cell[0] += 1
            cell[2] += size_bytes
            return
        if len(entries) < self.capacity:
            entries[item] = [1, 0, size_bytes]
            return
        victim = min(entries.items(), key=lambda kv: (kv[1][0], kv[0]))
        count, _error, byte_count = victim[1]
        del entries[victim[0]]
        entries[item] = [count + 1, count, byte_count + size_bytes]

    def candidates(self) -> dict:
        """item -> (estimated count, max overestimate error, estimated bytes)."""
        return {item: tuple(cell) for item, cell in self._entries.items()}

    def __len__(self) -> int:
        return len(self._entries)
