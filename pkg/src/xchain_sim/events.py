"""Virtual-time event queue; ties break by insertion order."""
from __future__ import annotations

import heapq
import itertools
from typing import Callable


class EventQueue:
    def __init__(self):
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, action: Callable[[], None]) -> int:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        seq = next(self._seq)
        heapq.heappush(self._heap, (time, seq, action))
        return seq

    def pop(self) -> tuple[float, int, Callable[[], None]]:
        time, seq, action = heapq.heappop(self._heap)
        self.now = time
        return time, seq, action

    def run(self, until: Callable[[], bool] | None = None) -> None:
        while self._heap:
            if until is not None and until():
                return
            _, _, action = self.pop()
            action()
