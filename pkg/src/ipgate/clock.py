"""Injectable time sources. Components take a zero-argument callable returning epoch seconds."""

from __future__ import annotations

import threading
import time
from typing import Callable

ClockFn = Callable[[], float]

system_clock: ClockFn = time.time


class ManualClock:
    """A clock that only moves when told to. Callable like time.time."""

    def __init__(self, start: float = 1_000_000.0) -> None:
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def now(self) -> float:
        return self()

    def advance(self, seconds: float) -> float:
        with self._lock:
            self._now += float(seconds)
            return self._now

    def set(self, now: float) -> None:
        with self._lock:
            self._now = float(now)
