"""Injectable time source.

All policy time in the engine (lock deadlines, pool failure windows, periodic
dispatch boundaries, idle-shrink) reads one of these clocks so tests can drive
time deterministically. Thread blocking still happens in short real-time
slices; only the *decisions* consult the clock.
"""

from __future__ import annotations

import threading
import time


class SystemClock:
    """Monotonic wall clock."""

    def now(self) -> float:
        return time.monotonic()

    @property
    def manual(self) -> bool:
        return False


class ManualClock:
    """Test clock advanced explicitly. Starts at 0.0 unless told otherwise."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._mu = threading.Lock()

    def now(self) -> float:
        with self._mu:
            return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock cannot go backwards")
        with self._mu:
            self._now += dt
            return self._now

    @property
    def manual(self) -> bool:
        return True
