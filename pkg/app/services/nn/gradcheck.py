# app/services/nn/gradcheck.py
"""
中心差分梯度校验。

误差口径（按范数的相对误差）：
    max|analytic - numeric| / max(max|numeric|, tiny)
在 float64_mode 下跑，步长 h 默认 1e-3。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from services.nn.tensor import Tensor, float64_mode


@dataclass
class GradCheckResult:
    name: str
    max_abs_err: float
    rel_err: float
    ok: bool


def numeric_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    对 tensor 的元素逐个扰动 ±h，返回 (被检查的扁平下标, 数值梯度)。
    max_entries 限制检查的元素数（大张量随机抽样）。
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.zeros(idx.size, dtype=np.float64)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return idx, out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = 64,
    names: Sequence[str] | None = None,
) -> list[GradCheckResult]:
    """
    fn 每次调用都要重新前向出标量 loss；tensors 必须是 float64 的 requires_grad 叶子。
    """
    with float64_mode():
        for t in tensors:
            t.grad = None
        loss = fn()
        loss.backward()
        results: list[GradCheckResult] = []
        for j, t in enumerate(tensors):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            idx, num = numeric_grad(fn, t, h=h, max_entries=max_entries)
            ana = analytic.reshape(-1)[idx].astype(np.float64)
            err = float(np.max(np.abs(ana - num))) if idx.size else 0.0
            scale = max(float(np.max(np.abs(num))) if idx.size else 0.0, 1e-12)
            rel = err / scale
            label = names[j] if names else (t.name or f"input{j}")
            results.append(GradCheckResult(label, err, rel, rel <= tol or err <= tol * 1e-3))
    return results
