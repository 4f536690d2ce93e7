# app/services/train/optim.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from services.nn.module import Module

logger = logging.getLogger(__name__)


class NonFiniteGradientError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


def decays(name: str, value: np.ndarray) -> bool:
    """只对卷积核做 weight decay；BN 仿射参数和 bias 豁免"""
    return value.ndim == 4


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    state: dict[str, np.ndarray] | None = None,
    decay_filter: Callable[[str, np.ndarray], bool] = decays,
) -> dict[str, np.ndarray]:
    """
    动量 SGD，原地更新 params：
        g = grad + wd * p（只对 decay_filter 选中的参数）
        v = momentum * v + g
        p -= lr * v
    先检查全部梯度，有 NaN/Inf 就整步放弃，参数和动量都不动。
    """
    state = {} if state is None else state
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if weight_decay and decay_filter(name, p):
            g = g + weight_decay * p
        v = state.get(name)
        v = g if v is None else momentum * v + g
        state[name] = v
        p -= (lr * v).astype(p.dtype, copy=False)
    return state


@dataclass
class SGD:
    """绑定到模型参数上的 sgd_step"""
    model: Module
    momentum: float = 0.9
    weight_decay: float = 5e-4
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, lr: float) -> None:
        named = dict(self.model.named_parameters())
        sgd_step(
            {k: t.data for k, t in named.items()},
            {k: t.grad for k, t in named.items()},
            lr,
            self.momentum,
            self.weight_decay,
            self.state,
        )

    def zero_grad(self) -> None:
        self.model.zero_grad()


def ema_update(
    shadow: dict[str, np.ndarray], current: Mapping[str, np.ndarray], decay: float = 0.9998
) -> dict[str, np.ndarray]:
    """shadow = decay * shadow + (1 - decay) * current，原地更新并返回 shadow"""
    for name, value in current.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * np.asarray(value, dtype=s.dtype)
    return shadow


class ModelEMA:
    """
    参数和 BN running 统计量的指数滑动平均，初值是构造时模型的拷贝。
    评估和导出用 EMA 权重。
    """

    def __init__(self, model: Module, decay: float = 0.9998):
        if not (0.0 < decay < 1.0):
            raise ValueError(f"ema decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = model.state_dict()
        self.updates = 0

    def update(self, model: Module) -> None:
        current = {name: p.data for name, p in model.named_parameters()}
        current.update(dict(model.named_buffers()))
        ema_update(self.shadow, current, self.decay)
        self.updates += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shadow.items()}
