# app/services/model/detector.py
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from services.model.backbone import CSPRepResNet
from services.model.blocks import (
    ConvBN,
    ConvRecord,
    RepResBlock,
    ReparamError,
    StageConfigError,
    profile_convs,
)
from services.model.head import ETHead, LevelOutput, flatten_outputs
from services.model.neck import PANNeck
from services.nn.module import Module
from services.nn.tensor import DimensionError, Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelScale:
    alpha: float
    beta: float
    name: str = "custom"

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise StageConfigError(f"scale multipliers must be > 0, got alpha={self.alpha} beta={self.beta}")


SCALE_PRESETS: dict[str, ModelScale] = {
    "s": ModelScale(0.50, 0.33, "s"),
    "m": ModelScale(0.75, 0.67, "m"),
    "l": ModelScale(1.00, 1.00, "l"),
    "x": ModelScale(1.25, 1.33, "x"),
}


def resolve_scale(name: str | None = None, alpha: float | None = None, beta: float | None = None) -> ModelScale:
    """预设名 + 可选的 alpha/beta 覆盖；只给 alpha/beta 时名字为 custom"""
    base = SCALE_PRESETS[name] if name else SCALE_PRESETS["l"]
    if alpha is None and beta is None:
        return base
    return ModelScale(
        alpha=base.alpha if alpha is None else float(alpha),
        beta=base.beta if beta is None else float(beta),
        name="custom",
    )


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    backbone_depths: tuple[int, ...] = (3, 6, 6, 3)
    neck_widths: tuple[int, ...] = (192, 384, 768)
    neck_depth: int = 3
    num_classes: int = 80
    reg_max: int = 16
    strides: tuple[int, ...] = (8, 16, 32)
    act: str = "silu"

    def __post_init__(self) -> None:
        if any(w <= 0 for w in self.backbone_widths + self.neck_widths):
            raise StageConfigError("widths must be positive")
        if self.reg_max < 1:
            raise StageConfigError(f"reg_max must be >= 1, got {self.reg_max}")
        if tuple(self.strides) != (8, 16, 32):
            raise StageConfigError(f"detector has exactly 3 levels at strides 8/16/32, got {self.strides}")
        if self.num_classes < 1:
            raise StageConfigError(f"num_classes must be >= 1, got {self.num_classes}")


def _scale_width(base: int, alpha: float) -> int:
    w = int(round(base * alpha))
    if w % 2:
        w += 1
    return max(8, w)


def _scale_depth(base: int, beta: float) -> int:
    return max(1, int(round(base * beta)))


def scale_config(cfg: ModelConfig, s: ModelScale) -> ModelConfig:
    """宽度 round(base*alpha) 取偶且 >= 8；深度 max(1, round(base*beta))"""
    return replace(
        cfg,
        backbone_widths=tuple(_scale_width(w, s.alpha) for w in cfg.backbone_widths),
        backbone_depths=tuple(_scale_depth(d, s.beta) for d in cfg.backbone_depths),
        neck_widths=tuple(_scale_width(w, s.alpha) for w in cfg.neck_widths),
        neck_depth=_scale_depth(cfg.neck_depth, s.beta),
    )


class DetectorModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = CSPRepResNet(cfg.backbone_widths, cfg.backbone_depths, act=cfg.act)
        self.neck = PANNeck(self.backbone.out_channels, cfg.neck_widths, cfg.neck_depth, act=cfg.act)
        self.head = ETHead(self.neck.out_channels, cfg.num_classes, cfg.reg_max, act=cfg.act)
        self.cfg = cfg
        self.reparameterized = False

    def forward(self, images: Tensor) -> list[LevelOutput]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError("detector", "input", "[N,3,H,W]", images.shape)
        h, w = images.shape[2], images.shape[3]
        if h % 32 or w % 32:
            raise DimensionError("detector", "spatial size", "divisible by 32", (h, w))
        return self.head(self.neck(self.backbone(images)))

    def forward_flat(self, images: Tensor) -> tuple[Tensor, Tensor, list[tuple[int, int]]]:
        """返回 cls [N,A,C]、reg [N,A,4,R+1] 和每层特征图尺寸"""
        outs = self.forward(images)
        shapes = [(o.cls_logits.shape[2], o.cls_logits.shape[3]) for o in outs]
        cls, reg = flatten_outputs(outs, self.cfg.reg_max)
        return cls, reg, shapes


def init_weights(model: Module, seed: int) -> None:
    """
    按参数遍历顺序从同一个 rng 抽样：
    4 维卷积权重 Kaiming-uniform（fan-in），BN gamma=1，其余（beta、bias）为 0
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if p.ndim == 4:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            bound = math.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=p.shape)
        elif name.endswith("bn_gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0


def build_model(cfg: ModelConfig, seed: int = 0) -> DetectorModel:
    model = DetectorModel(cfg)
    init_weights(model, seed)
    model.head.init_cls_prior()
    counts = count_params(model)
    logger.debug(
        f"[model] 构建完成. seed={seed}, widths={cfg.backbone_widths}, depths={cfg.backbone_depths}, "
        f"neck={cfg.neck_widths}x{cfg.neck_depth}, params={counts['total']}"
    )
    return model


def count_params(m: Module) -> dict[str, int]:
    """参数计数（含 BN 仿射参数，不含 running 统计量）"""
    out: dict[str, int] = {"total": 0}
    for part in ("backbone", "neck", "head"):
        sub = getattr(m, part, None)
        n = sum(p.data.size for p in sub.parameters()) if isinstance(sub, Module) else 0
        out[part] = int(n)
    out["total"] = int(sum(p.data.size for p in m.parameters()))
    return out


def _fused(m: Module) -> Module:
    if isinstance(m, ConvBN):
        return m.to_conv()
    if isinstance(m, RepResBlock) and not m.is_fused:
        m.fuse_()
    _fuse_tree(m)
    return m


def _fuse_tree(module: Module) -> None:
    for key, value in list(module.__dict__.items()):
        if key.startswith("_"):
            continue
        if isinstance(value, Module):
            setattr(module, key, _fused(value))
        elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
            value[:] = [_fused(v) for v in value]


def reparameterize_model(model: DetectorModel) -> DetectorModel:
    """
    新的推理形态模型：每个 RepResBlock 合并分支，其余 ConvBN 把 BN 折叠进卷积。
    原模型不变。
    """
    if model.reparameterized:
        raise ReparamError("model is already re-parameterized")
    out = copy.deepcopy(model)
    _fuse_tree(out)
    out.reparameterized = True
    out.eval()
    return out


# ---------------------------------------------------------------------------
# 逐层表 / FLOPs
# ---------------------------------------------------------------------------

PROFILE_SIZE = 64


@dataclass
class LayerRow:
    name: str
    out_shape: tuple[int, ...]
    params: int
    flops: int


@dataclass
class ArchitectureReport:
    scale: str
    input_size: int
    params: dict[str, int]
    layers: list[LayerRow] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return int(sum(r.flops for r in self.layers))

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "input_size": self.input_size,
            "params": dict(self.params),
            "gflops": self.flops / 1e9,
        }


def profile_model(model: DetectorModel, input_size: int = 640) -> list[LayerRow]:
    """
    在 64x64 输入上跑一次前向记录每个卷积，再按面积比例缩放到 input_size。
    输入能被 32 整除时结果是精确的。
    """
    if input_size % 32:
        raise DimensionError("profile", "input size", "divisible by 32", input_size)
    was_training = model.training
    model.eval()
    sample = Tensor(np.zeros((1, 3, PROFILE_SIZE, PROFILE_SIZE)))
    try:
        with no_grad(), profile_convs(model) as records:
            model(sample)
    finally:
        model.train(was_training)
    rows = [_scale_record(rec, input_size) for rec in records]
    logger.debug(f"[model] profile 完成. layers={len(rows)}, input_size={input_size}")
    return rows


def _scale_record(rec: ConvRecord, input_size: int) -> LayerRow:
    n, c, ho, wo = rec.out_shape
    if ho == 1 and wo == 1:
        # 64 像素下最粗的特征图是 2x2，1x1 输出只能来自全局池化后的 ESE，不随输入变化
        ho_s = wo_s = 1
    else:
        ho_s = ho * input_size // PROFILE_SIZE
        wo_s = wo * input_size // PROFILE_SIZE
    macs_per_px = rec.macs // (ho * wo * n)
    return LayerRow(
        name=rec.name,
        out_shape=(n, c, ho_s, wo_s),
        params=rec.params,
        flops=int(2 * macs_per_px * ho_s * wo_s),
    )


def architecture_report(model: DetectorModel, input_size: int = 640, scale_name: str = "custom") -> ArchitectureReport:
    return ArchitectureReport(
        scale=scale_name,
        input_size=input_size,
        params=count_params(model),
        layers=profile_model(model, input_size),
    )
