# app/core/ids.py
from __future__ import annotations

import random
import string


def generate_run_id(command: str, seed: int | None = None) -> str:
    """
    run_id: 子命令_8位字符
    给定 seed 时字符由 seed 决定，同一 seed 的两次运行日志能对上
    """
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    chars = "".join(rng.choices(string.ascii_lowercase + string.digits, k=8))
    return f"{command}_{chars}"
