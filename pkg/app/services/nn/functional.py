# app/services/nn/functional.py
"""
检测器用到的全部算子，每个算子 = numpy 前向 + 闭包形式的反向规则。

广播规则很窄：
- Tensor 与 Tensor 的 add/mul/div 要求同形状，唯一例外是 [N,C,1,1] 的通道缩放（ESE 注意力）
- 与 numpy 常量运算（add_const/mul_const/maximum_const...）允许常量广播到张量形状
"""
from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

from services.nn.tensor import ContractError, DimensionError, Tensor


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, "shape", a.shape, b.shape)


def _const_like(op: str, x: Tensor, c: Any) -> np.ndarray:
    arr = np.asarray(c, dtype=x.data.dtype)
    try:
        out_shape = np.broadcast_shapes(x.shape, arr.shape)
    except ValueError:
        raise DimensionError(op, "broadcast", x.shape, arr.shape) from None
    if out_shape != x.shape:
        raise DimensionError(op, "broadcast", x.shape, arr.shape)
    return arr


# ---------------------------------------------------------------------------
# 卷积
# ---------------------------------------------------------------------------

def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """
    标准互相关卷积，NCHW。
    H' = (H + 2*pad - kh) // stride + 1
    """
    if x.ndim != 4:
        raise DimensionError("conv2d", "input rank", 4, x.ndim)
    if weight.ndim != 4:
        raise DimensionError("conv2d", "weight rank", 4, weight.ndim)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError("conv2d", "in_channels", wcin, cin)
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError("conv2d", "kernel size", "{1,3}", (kh, kw))
    if stride not in (1, 2):
        raise DimensionError("conv2d", "stride", "{1,2}", stride)
    if pad < 0:
        raise DimensionError("conv2d", "padding", ">= 0", pad)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d", "bias", (cout,), bias.shape)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d", "spatial size", ">= kernel", (h, w))

    wd = weight.data
    if kh == 1 and kw == 1 and pad == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        w2 = wd[:, :, 0, 0]
        out = np.tensordot(xs, w2, axes=([1], [1])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data.reshape(1, cout, 1, 1)

        def backward_1x1(g: np.ndarray):
            gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3])).reshape(cout, cin, 1, 1)
            gxs = np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb) if bias is not None else (gx, gw)

        parents = (x, weight, bias) if bias is not None else (x, weight)
        return Tensor.from_op(out, parents, backward_1x1, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad > 0 else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g: np.ndarray):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # (N, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad > 0 else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# BatchNorm
# ---------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.9,
) -> Tensor:
    """
    y = gamma * (x - mean) / sqrt(var + eps) + beta，按通道。

    - training=True：用 batch 统计量，并原地更新 running_mean/running_var
      running = momentum * running + (1 - momentum) * batch
    - training=False：用保存的 running 统计量
    """
    if x.ndim != 4:
        raise DimensionError("batchnorm", "input rank", 4, x.ndim)
    c = x.shape[1]
    for label, t in (("gamma", gamma.data), ("beta", beta.data), ("mean", running_mean), ("var", running_var)):
        if np.shape(t) != (c,):
            raise DimensionError("batchnorm", f"channels ({label})", (c,), np.shape(t))
    if eps < 0:
        raise ContractError(f"batchnorm eps must be >= 0, got {eps}")

    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
    else:
        mean = np.asarray(running_mean, dtype=xd.dtype)
        var = np.asarray(running_var, dtype=xd.dtype)
        if np.any(var + eps <= 0):
            raise ContractError("batchnorm needs var + eps > 0 in infer mode")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# 逐元素运算
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return Tensor.from_op(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g: np.ndarray):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor.from_op(x.data * s, (x,), backward, "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return Tensor.from_op(x.data * mask, (x,), backward, "relu")


def activation(x: Tensor, kind: str | None) -> Tensor:
    if kind is None or kind == "none":
        return x
    if kind == "silu":
        return silu(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation: {kind}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g: np.ndarray):
        return g, g

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g: np.ndarray):
        return g, -g

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def neg(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (-g,)

    return Tensor.from_op(-x.data, (x,), backward, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """同形状逐元素乘；或 [N,C,H,W] * [N,C,1,1] 的通道缩放"""
    if a.shape == b.shape:

        def backward(g: np.ndarray):
            return g * b.data, g * a.data

        return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")

    if a.ndim == 4 and b.shape == (a.shape[0], a.shape[1], 1, 1):

        def backward_scale(g: np.ndarray):
            return g * b.data, (g * a.data).sum(axis=(2, 3), keepdims=True)

        return Tensor.from_op(a.data * b.data, (a, b), backward_scale, "mul_channel")

    raise DimensionError("mul", "shape", a.shape, b.shape)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out = a.data / b.data

    def backward(g: np.ndarray):
        return g / b.data, -g * out / b.data

    return Tensor.from_op(out, (a, b), backward, "div")


def add_const(x: Tensor, c: Any) -> Tensor:
    arr = _const_like("add_const", x, c)

    def backward(g: np.ndarray):
        return (g,)

    return Tensor.from_op(x.data + arr, (x,), backward, "add_const")


def mul_const(x: Tensor, c: Any) -> Tensor:
    arr = _const_like("mul_const", x, c)

    def backward(g: np.ndarray):
        return (g * arr,)

    return Tensor.from_op(x.data * arr, (x,), backward, "mul_const")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g: np.ndarray):
        return (g * y,)

    return Tensor.from_op(y, (x,), backward, "exp")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """log(max(x, floor))；被截断的位置梯度为 0"""
    xc = np.maximum(x.data, floor) if floor > 0 else x.data
    live = x.data > floor if floor > 0 else np.ones_like(x.data, dtype=bool)

    def backward(g: np.ndarray):
        return (np.where(live, g / xc, 0.0),)

    return Tensor.from_op(np.log(xc), (x,), backward, "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    y = x.data
    live = np.ones_like(y, dtype=bool)
    if lo is not None:
        live &= y >= lo
        y = np.maximum(y, lo)
    if hi is not None:
        live &= x.data <= hi
        y = np.minimum(y, hi)

    def backward(g: np.ndarray):
        return (g * live,)

    return Tensor.from_op(y, (x,), backward, "clamp")


def maximum_const(x: Tensor, c: Any) -> Tensor:
    arr = _const_like("maximum_const", x, c)
    live = x.data >= arr

    def backward(g: np.ndarray):
        return (g * live,)

    return Tensor.from_op(np.maximum(x.data, arr), (x,), backward, "maximum_const")


def minimum_const(x: Tensor, c: Any) -> Tensor:
    arr = _const_like("minimum_const", x, c)
    live = x.data <= arr

    def backward(g: np.ndarray):
        return (g * live,)

    return Tensor.from_op(np.minimum(x.data, arr), (x,), backward, "minimum_const")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(x.data, axis=axis)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax(x.data, axis=axis)

    def backward(g: np.ndarray):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), backward, "log_softmax")


def elementwise(kind: str, *operands: Tensor, axis: int = -1) -> Tensor:
    """按名字分派的逐元素入口：silu|sigmoid|relu|add|mul|softmax"""
    unary = {"silu": silu, "sigmoid": sigmoid, "relu": relu}
    if kind in unary:
        (x,) = operands
        return unary[kind](x)
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind in ("softmax", "softmax_axis"):
        (x,) = operands
        return softmax(x, axis=axis)
    raise ValueError(f"unknown elementwise kind: {kind}")


# ---------------------------------------------------------------------------
# 池化 / 缩放
# ---------------------------------------------------------------------------

def _max1d(x: Tensor, k: int, axis: int) -> Tensor:
    # 沿一个空间轴做 stride=1、pad=(k-1)/2 的滑窗最大值；二维最大池化 = 两次一维
    r = (k - 1) // 2
    pads = [(0, 0)] * 4
    pads[axis] = (r, r)
    xp = np.pad(x.data, pads, constant_values=-np.inf)
    win = sliding_window_view(xp, k, axis=axis)  # (..., k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        idx = list(np.indices(g.shape, sparse=True))
        idx[axis] = idx[axis] + arg
        np.add.at(gxp, tuple(idx), g)
        sl = [slice(None)] * 4
        sl[axis] = slice(r, r + x.shape[axis])
        return (gxp[tuple(sl)],)

    return Tensor.from_op(out, (x,), backward, "maxpool")


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """SPP 用的保形最大池化：kernel 奇数，stride 1，pad (k-1)/2"""
    if x.ndim != 4:
        raise DimensionError("maxpool2d", "input rank", 4, x.ndim)
    if k < 1 or k % 2 == 0:
        raise DimensionError("maxpool2d", "kernel", "odd", k)
    if k == 1:
        return x
    return _max1d(_max1d(x, k, axis=3), k, axis=2)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError("global_avg_pool", "input rank", 4, x.ndim)
    n, c, h, w = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "global_avg")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError("upsample", "input rank", 4, x.ndim)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), backward, "upsample2x")


def pool_and_resize(kind: str, x: Tensor) -> Tensor:
    """kind: maxpool_<k> | global_avg | nearest_upsample_2x"""
    if kind.startswith("maxpool_"):
        return maxpool2d(x, int(kind.split("_", 1)[1]))
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "nearest_upsample_2x":
        return upsample_nearest2x(x)
    raise ValueError(f"unknown pool kind: {kind}")


# ---------------------------------------------------------------------------
# 形状变换 / 规约
# ---------------------------------------------------------------------------

def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise DimensionError("concat", "operands", ">= 1", 0)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise DimensionError("concat", f"non-concat axes (axis={axis})", ref, t.shape)
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(src),)

    return Tensor.from_op(x.data.reshape(tuple(shape)), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g: np.ndarray):
        return (g.transpose(inv),)

    return Tensor.from_op(x.data.transpose(tuple(axes)), (x,), backward, "transpose")


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """按一维整数下标取行（可重复），反向用 add.at 累加"""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise DimensionError("take", "indices", ">= 1", 0)
    ax = axis % x.ndim

    def backward(g: np.ndarray):
        gx = np.zeros((x.shape[ax],) + tuple(s for i, s in enumerate(x.shape) if i != ax), dtype=g.dtype)
        np.add.at(gx, idx, np.moveaxis(g, ax, 0))
        return (np.moveaxis(gx, 0, ax),)

    return Tensor.from_op(np.take(x.data, idx, axis=ax), (x,), backward, "take")


def column(x: Tensor, j: int) -> Tensor:
    """[P, K] -> [P, 1] 的第 j 列"""
    return take(x, np.array([j]), axis=1)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul_const(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)
