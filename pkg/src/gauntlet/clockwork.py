"""Monotonic clocks: real time for live runs, logical time for CI.

Simulated mode makes every run bit-reproducible: sleeps become logical
advances and all timestamps are integers of milliseconds since clock
creation.
"""
from __future__ import annotations

import threading
import time


class LiveClock:
    """Wall-clock driven by time.monotonic_ns."""

    simulated = False

    def __init__(self):
        self._origin = time.monotonic_ns()

    def now_ms(self) -> int:
        return (time.monotonic_ns() - self._origin) // 1_000_000

    def sleep_ms(self, ms: int) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)


class SimulatedClock:
    """Logical clock advanced explicitly; sleep_ms advances it."""

    simulated = True

    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("cannot advance a clock backwards")
        with self._lock:
            self._now += int(ms)
            return self._now

    def sleep_ms(self, ms: int) -> None:
        self.advance(ms)


Clock = LiveClock | SimulatedClock


def make_clock(mode: str) -> Clock:
    if mode == "live":
        return LiveClock()
    if mode == "simulated":
        return SimulatedClock()
    raise ValueError(f"unknown clock mode {mode!r}")
