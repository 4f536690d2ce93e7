# app/services/nn/module.py
from __future__ import annotations

from typing import Any, Iterator

import numpy as np

from services.nn.tensor import DimensionError, Tensor


class Module:
    """
    层的基类。

    参数 = 属性里 requires_grad=True 的 Tensor；子模块 = 属性里的 Module 或 Module 列表。
    buffer（BN 的 running 统计量）单独登记在 _buffers 里，不参与求导。
    命名按属性定义顺序展开成点分路径，比如 backbone.stages.0.blocks.1.conv1.weight
    """

    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    # ---- 遍历 ----
    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, sub in enumerate(value):
                    yield f"{key}.{i}", sub

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{key}" if prefix else key), value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield (f"{prefix}.{key}" if prefix else key), value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    # ---- 模式 ----
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # ---- 状态 ----
    def state_dict(self) -> dict[str, np.ndarray]:
        """参数和 buffer 的拷贝，按遍历顺序"""
        out: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """
        原地写回参数和 buffer，返回 state 里没被用到的键。
        strict=True 时缺键或多键都报错。
        """
        used: set[str] = set()
        missing: list[str] = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError("load_state_dict", name, p.shape, value.shape)
            p.data = np.asarray(value, dtype=p.data.dtype, order="C").copy()
            used.add(name)
        for name, b in self.named_buffers():
            if name not in state:
                missing.append(name)
                continue
            value = np.asarray(state[name])
            if value.shape != b.shape:
                raise DimensionError("load_state_dict", name, b.shape, value.shape)
            b[...] = value
            used.add(name)
        unexpected = [k for k in state if k not in used]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        return unexpected
