# app/services/train/schedule.py
from __future__ import annotations

import math


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """
    线性 warmup 到 base_lr，之后余弦退火到 0。
    step 从 1 开始计；warmup 最后一步正好是 base_lr，最后一步是 0。
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be > 0, got {total_steps}")
    if not (0 <= warmup_steps < total_steps):
        raise ValueError(f"warmup_steps must be in [0, {total_steps}), got {warmup_steps}")
    step = min(max(step, 0), total_steps)
    if step <= warmup_steps:
        return base_lr * step / warmup_steps if warmup_steps else base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
