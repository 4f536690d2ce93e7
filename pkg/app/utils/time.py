# app/utils/time.py
from __future__ import annotations

import time
from dataclasses import dataclass


def now_ms() -> float:
    return time.perf_counter() * 1000.0


@dataclass
class Stopwatch:
    """
    简单计时器，用于统计 epoch / 前向耗时
    """
    start_ms: float = 0.0

    def __post_init__(self) -> None:
        self.start_ms = now_ms()

    def elapsed_ms(self) -> float:
        return now_ms() - self.start_ms

    def restart(self) -> float:
        elapsed = self.elapsed_ms()
        self.start_ms = now_ms()
        return elapsed
