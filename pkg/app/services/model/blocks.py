# app/services/model/blocks.py
"""
结构积木：ConvBN / Conv、conv-BN 融合、RepResBlock（训练形态 / 推理形态）、
ESE 通道注意力、SPP、CSPRepResStage。

RepResBlock 拓扑：
    entry 3x3 ConvBN+act -> {3x3 ConvBN, 1x1 ConvBN} 相加 -> act  (+ 可选恒等捷径)
推理形态：两个带 bias 的 3x3 卷积 (+ 恒等捷径)，即普通残差块。
"""
from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from services.nn import functional as F
from services.nn.module import Module
from services.nn.tensor import DimensionError, Tensor, parameter

logger = logging.getLogger(__name__)


class ReparamError(RuntimeError):
    """对已经是推理形态的块再次重参数化"""


class StageConfigError(ValueError):
    """构造参数不合法（奇数宽度、块数为 0 等）"""


# ---------------------------------------------------------------------------
# 卷积调用记录（inspect 的逐层表和 FLOPs 统计用）
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvRecord:
    name: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: int
    stride: int
    params: int
    macs: int


_conv_records: ContextVar[list[ConvRecord] | None] = ContextVar("conv_records", default=None)


@contextmanager
def profile_convs(model: Module) -> Iterator[list[ConvRecord]]:
    """块内每次 ConvBN/Conv 前向都追加一条记录，名字取模块路径"""
    for name, m in model.named_modules():
        if isinstance(m, (ConvBN, Conv)):
            m.profile_name = name
    records: list[ConvRecord] = []
    token = _conv_records.set(records)
    try:
        yield records
    finally:
        _conv_records.reset(token)


def _record(layer: "ConvBN | Conv", x: Tensor, out: Tensor) -> None:
    records = _conv_records.get()
    if records is None:
        return
    cout, cin, k, _ = layer.weight.shape
    n, _, ho, wo = out.shape
    records.append(
        ConvRecord(
            name=getattr(layer, "profile_name", ""),
            in_shape=x.shape,
            out_shape=out.shape,
            kernel=k,
            stride=layer.stride,
            params=sum(p.data.size for p in layer.parameters()),
            macs=int(n * cout * ho * wo * cin * k * k),
        )
    )


# ---------------------------------------------------------------------------
# 基础层
# ---------------------------------------------------------------------------

@dataclass
class ConvBNParams:
    weight: np.ndarray  # [Cout, Cin, k, k]
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        k = self.weight.shape[-1]
        if self.weight.ndim != 4 or k not in (1, 3) or self.weight.shape[-2] != k:
            raise DimensionError("ConvBNParams", "kernel", "{1,3} square", self.weight.shape)
        if np.any(np.asarray(self.bn_var) < 0):
            raise StageConfigError("bn_var must be >= 0")


class Conv(Module):
    """普通卷积（带 bias），可选激活"""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, act: str | None = None):
        super().__init__()
        self.weight = parameter(np.zeros((cout, cin, k, k)))
        self.bias = parameter(np.zeros((cout,)))
        self.stride = stride
        self.pad = k // 2
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
        _record(self, x, out)
        return F.activation(out, self.act)


class ConvBN(Module):
    """卷积（无 bias）+ BatchNorm + 可选激活"""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int,
        stride: int = 1,
        act: str | None = "silu",
        eps: float = 1e-5,
    ):
        super().__init__()
        self.weight = parameter(np.zeros((cout, cin, k, k)))
        self.bn_gamma = parameter(np.ones((cout,)))
        self.bn_beta = parameter(np.zeros((cout,)))
        self.register_buffer("bn_mean", np.zeros((cout,), dtype=np.float32))
        self.register_buffer("bn_var", np.ones((cout,), dtype=np.float32))
        self.stride = stride
        self.pad = k // 2
        self.act = act
        self.eps = eps

    @property
    def bn_mean(self) -> np.ndarray:
        return self._buffers["bn_mean"]

    @property
    def bn_var(self) -> np.ndarray:
        return self._buffers["bn_var"]

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, None, stride=self.stride, pad=self.pad)
        _record(self, x, out)
        out = F.batchnorm(
            out,
            self.bn_gamma,
            self.bn_beta,
            self.bn_mean,
            self.bn_var,
            eps=self.eps,
            training=self.training,
        )
        return F.activation(out, self.act)

    def params(self) -> ConvBNParams:
        return ConvBNParams(
            weight=self.weight.data,
            bn_gamma=self.bn_gamma.data,
            bn_beta=self.bn_beta.data,
            bn_mean=self.bn_mean,
            bn_var=self.bn_var,
            eps=self.eps,
        )

    def to_conv(self) -> Conv:
        """BN 折叠进卷积后的等价 Conv（保留激活）"""
        cout, cin, k, _ = self.weight.shape
        w, b = fuse_conv_bn(self.params())
        conv = Conv(cin, cout, k, stride=self.stride, act=self.act)
        conv.weight.data[...] = w
        conv.bias.data[...] = b
        conv.training = self.training
        return conv


def fuse_conv_bn(p: ConvBNParams | ConvBN) -> tuple[np.ndarray, np.ndarray]:
    """
    weight' = weight * gamma / sqrt(var + eps)
    bias'   = beta - mean * gamma / sqrt(var + eps)
    计算在 float64 里做，结果转回权重的 dtype。
    """
    if isinstance(p, ConvBN):
        p = p.params()
    scale = np.asarray(p.bn_gamma, dtype=np.float64) / np.sqrt(np.asarray(p.bn_var, dtype=np.float64) + p.eps)
    w = np.asarray(p.weight, dtype=np.float64) * scale.reshape(-1, 1, 1, 1)
    b = np.asarray(p.bn_beta, dtype=np.float64) - np.asarray(p.bn_mean, dtype=np.float64) * scale
    return w.astype(p.weight.dtype), b.astype(p.weight.dtype)


def pad_1x1_to_3x3(kernel: np.ndarray) -> np.ndarray:
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise DimensionError("pad_1x1_to_3x3", "kernel", "(Cout, Cin, 1, 1)", kernel.shape)
    out = np.zeros(kernel.shape[:2] + (3, 3), dtype=kernel.dtype)
    out[:, :, 1, 1] = kernel[:, :, 0, 0]
    return out


# ---------------------------------------------------------------------------
# RepResBlock
# ---------------------------------------------------------------------------

class RepResBlock(Module):
    def __init__(self, cin: int, cout: int, act: str = "silu", shortcut: bool = True):
        super().__init__()
        if shortcut and cin != cout:
            raise StageConfigError(f"RepResBlock shortcut needs cin == cout, got {cin} -> {cout}")
        self.entry: ConvBN | Conv = ConvBN(cin, cout, 3, act=act)
        self.branch3: ConvBN | None = ConvBN(cout, cout, 3, act=None)
        self.branch1: ConvBN | None = ConvBN(cout, cout, 1, act=None)
        self.fused: Conv | None = None
        self.use_shortcut = shortcut
        self.act = act

    @property
    def is_fused(self) -> bool:
        return self.fused is not None

    def forward(self, x: Tensor) -> Tensor:
        y = self.entry(x)
        if self.fused is not None:
            y = self.fused(y)
        else:
            y = F.activation(F.add(self.branch3(y), self.branch1(y)), self.act)
        return F.add(x, y) if self.use_shortcut else y

    def fuse_(self) -> None:
        """原地切换到推理形态；外部请用 reparameterize()"""
        if self.fused is not None:
            raise ReparamError("RepResBlock is already in inference form")
        w3, b3 = fuse_conv_bn(self.branch3)
        w1, b1 = fuse_conv_bn(self.branch1)
        cout, cin, _, _ = w3.shape
        fused = Conv(cin, cout, 3, act=self.act)
        fused.weight.data[...] = w3 + pad_1x1_to_3x3(w1)
        fused.bias.data[...] = b3 + b1
        fused.training = self.training
        if isinstance(self.entry, ConvBN):
            self.entry = self.entry.to_conv()
        self.fused = fused
        self.branch3 = None
        self.branch1 = None


def reparameterize(block: RepResBlock) -> RepResBlock:
    """返回新的推理形态块，原块不变"""
    if block.is_fused:
        raise ReparamError("RepResBlock is already in inference form")
    out = copy.deepcopy(block)
    out.fuse_()
    return out


# ---------------------------------------------------------------------------
# ESE / SPP
# ---------------------------------------------------------------------------

class ESE(Module):
    """y = x * sigmoid(fc(global_avg(x)))"""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = Conv(channels, channels, 1)

    def gate(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.fc.weight.shape[1]:
            raise DimensionError("ese", "channels", self.fc.weight.shape[1], x.shape[1])
        return F.sigmoid(self.fc(F.global_avg_pool(x)))

    def forward(self, x: Tensor) -> Tensor:
        return F.mul(x, self.gate(x))


class SPP(Module):
    """concat[x, maxpool_k(x) for k] -> 1x1 ConvBN"""

    def __init__(self, cin: int, cout: int, kernel_sizes: Sequence[int] = (5, 9, 13), act: str = "silu"):
        super().__init__()
        for k in kernel_sizes:
            if k % 2 == 0:
                raise StageConfigError(f"SPP kernel must be odd, got {k}")
        self.kernel_sizes = tuple(kernel_sizes)
        self.conv = ConvBN(cin * (len(kernel_sizes) + 1), cout, 1, act=act)

    def forward(self, x: Tensor) -> Tensor:
        pooled = [x] + [F.maxpool2d(x, k) for k in self.kernel_sizes]
        return self.conv(F.concat(pooled, axis=1))


# ---------------------------------------------------------------------------
# CSPRepResStage
# ---------------------------------------------------------------------------

def stage_mid_width(cin: int, cout: int, downsample: bool) -> int:
    """骨干 stage 的内部宽度取 (cin+cout)/2 的偶数；neck stage 直接用 cout"""
    # 这个宽度和 head 的结构一起把 l 规模校准到约 52.2M 参数
    if downsample:
        return ((cin + cout) // 4) * 2
    return cout


class CSPRepResStage(Module):
    """
    y = out_conv(ese?(concat(split_a(d), blocks(split_b(d)))))
    骨干形态：d = 3x3 stride-2 下采样；neck 形态：d = x（无下采样、无 ESE、无捷径，可插 SPP）
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        num_blocks: int,
        downsample: bool = True,
        use_ese: bool = True,
        shortcut: bool = True,
        spp: bool = False,
        act: str = "silu",
    ):
        super().__init__()
        if cout % 2 != 0:
            raise StageConfigError(f"stage width must be even, got {cout}")
        if num_blocks < 1:
            raise StageConfigError(f"stage needs >= 1 block, got {num_blocks}")
        mid = stage_mid_width(cin, cout, downsample)
        half = mid // 2
        if half < 1:
            raise StageConfigError(f"stage internal width too small: {cin} -> {cout}")

        self.downsample: ConvBN | None = ConvBN(cin, mid, 3, stride=2, act=act) if downsample else None
        split_in = mid if downsample else cin
        self.split_a = ConvBN(split_in, half, 1, act=act)
        self.split_b = ConvBN(split_in, half, 1, act=act)
        blocks: list[Module] = []
        for i in range(num_blocks):
            blocks.append(RepResBlock(half, half, act=act, shortcut=shortcut))
            if spp and i == (num_blocks - 1) // 2:
                blocks.append(SPP(half, half, act=act))
        self.blocks = blocks
        self.ese: ESE | None = ESE(2 * half) if use_ese else None
        self.out_conv = ConvBN(2 * half, cout, 1, act=act)
        self.in_channels = cin
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError("stage", "channels", self.in_channels, x.shape[1] if x.ndim == 4 else x.shape)
        d = self.downsample(x) if self.downsample is not None else x
        a = self.split_a(d)
        b = self.split_b(d)
        for blk in self.blocks:
            b = blk(b)
        y = F.concat([a, b], axis=1)
        if self.ese is not None:
            y = self.ese(y)
        return self.out_conv(y)


def rep_blocks(module: Module) -> list[RepResBlock]:
    return [m for _, m in module.named_modules() if isinstance(m, RepResBlock)]
