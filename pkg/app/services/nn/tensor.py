# app/services/nn/tensor.py
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DimensionError(ValueError):
    """形状不匹配：op 名称 + 出错的轴 + 期望值 / 实际值"""

    def __init__(self, op: str, axis: str, expected: Any, got: Any):
        super().__init__(f"{op}: {axis} mismatch, expected {expected}, got {got}")
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got


class ContractError(ValueError):
    """调用方违反前置条件（非标量 backward、目标越界等）"""


# 记录开关和精度都是线程级别的：不同线程可以各自建图
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def float64_mode() -> Iterator[None]:
    """
    有限差分校验专用：块内新建的张量和运算结果都用 float64。
    正常训练/推理始终是 float32。
    """
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """
    稠密张量 + 反向模式自动求导。

    - data: 行优先的 numpy 数组（float32，校验模式下 float64）
    - grad: 仅叶子节点（requires_grad=True）在 backward 后填充，形状与 data 相同
    - 非叶子节点保存 parents 和 backward 规则，构成一张 DAG
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=default_dtype(), order="C")
        if any(int(s) < 1 for s in arr.shape):
            raise DimensionError("tensor", "extent", ">= 1", tuple(arr.shape))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=default_dtype(), order="C")
        out.grad = None
        out.name = ""
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # ---- 基本属性 ----
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ---- 反向传播 ----
    def _topo_order(self) -> list["Tensor"]:
        # 迭代式后序遍历，深层网络不会触发递归上限
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """
        从标量 loss 反传，把 d(loss)/d(leaf) 累加到每个 requires_grad 叶子的 grad 上。
        重复调用会继续累加，需要时先 zero_grad。
        """
        if self.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise DimensionError(f"{node.op}.backward", "gradient shape", p.shape, pg.shape)
                pg = pg.astype(p.data.dtype, copy=False)
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---- 运算符重载（实现都在 functional 里） ----
    def __add__(self, other: Any) -> "Tensor":
        from services.nn import functional as F

        return F.add(self, other) if isinstance(other, Tensor) else F.add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from services.nn import functional as F

        if isinstance(other, Tensor):
            return F.sub(self, other)
        return F.add_const(self, -np.asarray(other))

    def __rsub__(self, other: Any) -> "Tensor":
        from services.nn import functional as F

        return F.add_const(F.neg(self), other)

    def __mul__(self, other: Any) -> "Tensor":
        from services.nn import functional as F

        return F.mul(self, other) if isinstance(other, Tensor) else F.mul_const(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from services.nn import functional as F

        if isinstance(other, Tensor):
            return F.div(self, other)
        return F.mul_const(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self) -> "Tensor":
        from services.nn import functional as F

        return F.neg(self)


def parameter(data: Any, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
