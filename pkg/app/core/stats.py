# app/core/stats.py
from __future__ import annotations

import time
from dataclasses import dataclass, field
from threading import Lock


@dataclass
class TrainStats:
    """训练过程统计（数据线程和训练线程都会写）"""
    start_time: float = field(default_factory=time.time)
    steps: int = 0
    scenes_prepared: int = 0
    unmatched_gts: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    _epoch_sum: float = field(default=0.0, repr=False)
    _epoch_count: int = field(default=0, repr=False)
    _lock: Lock = field(default_factory=Lock, repr=False)

    def add_prepared(self, n: int) -> None:
        with self._lock:
            self.scenes_prepared += n

    def add_step(self, loss: float, unmatched: int = 0) -> None:
        with self._lock:
            self.steps += 1
            self.unmatched_gts += unmatched
            self._epoch_sum += loss
            self._epoch_count += 1

    def close_epoch(self) -> float:
        """结束一个 epoch，返回该 epoch 的平均 loss"""
        with self._lock:
            mean = self._epoch_sum / self._epoch_count if self._epoch_count else float("nan")
            self.epoch_losses.append(mean)
            self._epoch_sum = 0.0
            self._epoch_count = 0
            return mean

    def get_snapshot(self) -> dict:
        with self._lock:
            elapsed = int(time.time() - self.start_time)
            return {
                "steps": self.steps,
                "epochs": len(self.epoch_losses),
                "scenes_prepared": self.scenes_prepared,
                "unmatched_gts": self.unmatched_gts,
                "epoch_losses": list(self.epoch_losses),
                "elapsed": self._format_uptime(elapsed),
            }

    @staticmethod
    def _format_uptime(seconds: int) -> str:
        """格式化运行时间"""
        hours = seconds // 3600
        minutes = (seconds % 3600) // 60
        secs = seconds % 60
        parts = []
        if hours > 0:
            parts.append(f"{hours}h")
        if minutes > 0:
            parts.append(f"{minutes}m")
        parts.append(f"{secs}s")
        return " ".join(parts)
