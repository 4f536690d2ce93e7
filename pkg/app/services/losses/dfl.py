# app/services/losses/dfl.py
from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, softmax

from services.nn.tensor import ContractError, DimensionError, Tensor


def dfl_bins(target: np.ndarray, reg_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """目标 y 左右两个 bin：i = min(floor(y), reg_max-1)，权重 (i+1-y, y-i)"""
    left = np.minimum(np.floor(target), reg_max - 1).astype(np.int64)
    w_left = (left + 1) - target
    w_right = target - left
    return left, w_left, w_right


def distribution_focal_loss(bin_logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """
    bin_logits [P, 4, R+1]，target [P, 4] 取值 [0, R]。
    每条边 -((i+1-y)*log S_i + (y-i)*log S_{i+1})，4 条边取平均，再按 anchor 权重加权求和。
    """
    if bin_logits.ndim != 3 or bin_logits.shape[1] != 4:
        raise DimensionError("distribution_focal_loss", "logits", "[P, 4, R+1]", bin_logits.shape)
    p, _, bins = bin_logits.shape
    reg_max = bins - 1
    y = np.asarray(target, dtype=np.float64)
    if y.shape != (p, 4):
        raise DimensionError("distribution_focal_loss", "targets", (p, 4), y.shape)
    if np.any(y < 0) or np.any(y > reg_max):
        raise ContractError(f"dfl targets must lie in [0, {reg_max}]")
    w = np.ones(p) if weight is None else np.asarray(weight, dtype=np.float64).reshape(-1)
    if w.shape != (p,):
        raise DimensionError("distribution_focal_loss", "weights", (p,), w.shape)

    z = bin_logits.data.astype(np.float64)
    log_s = log_softmax(z, axis=-1)
    left, w_left, w_right = dfl_bins(y, reg_max)
    lsl = np.take_along_axis(log_s, left[..., None], axis=-1)[..., 0]
    lsr = np.take_along_axis(log_s, (left + 1)[..., None], axis=-1)[..., 0]
    per_side = -(w_left * lsl + w_right * lsr)
    loss = np.asarray((per_side.mean(axis=1) * w).sum())

    def backward(g: np.ndarray):
        two_hot = np.zeros_like(z)
        np.put_along_axis(two_hot, left[..., None], w_left[..., None], axis=-1)
        right = np.take_along_axis(two_hot, (left + 1)[..., None], axis=-1) + w_right[..., None]
        np.put_along_axis(two_hot, (left + 1)[..., None], right, axis=-1)
        grad = (softmax(z, axis=-1) - two_hot) * (w[:, None, None] / 4.0)
        return (g * grad,)

    return Tensor.from_op(loss, (bin_logits,), backward, "distribution_focal_loss")
