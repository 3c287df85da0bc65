"""Injectable millisecond clocks.

Everything that checks expiry or freshness takes a clock so tests can run on a
simulated timeline. Benchmark timings never go through these; they use
``time.perf_counter`` directly.
"""

from __future__ import annotations

import threading
import time


class WallClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)


class SimClock:
    """Manually advanced clock, thread safe."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot run backwards")
        with self._lock:
            self._now += ms
            return self._now

    def set(self, ms: int) -> None:
        with self._lock:
            if ms < self._now:
                raise ValueError("clock cannot run backwards")
            self._now = ms
