# app/services/model/head.py
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from services.model.blocks import ESE, Conv, ConvBN
from services.nn import functional as F
from services.nn.module import Module
from services.nn.tensor import Tensor

CLS_PRIOR_PROB = 0.01


@dataclass
class LevelOutput:
    cls_logits: Tensor  # [N, C, Hl, Wl]
    reg_logits: Tensor  # [N, 4*(reg_max+1), Hl, Wl]，通道按 [4, reg_max+1] 排列


class ETHeadLevel(Module):
    """
    单个尺度的 ET-head：
    - cls: g = ESE(x); h = ConvBN1x1(g) + g; logits = Conv3x3(h)
    - reg: g = ESE(x); h = ConvBN1x1(g);     bins   = Conv3x3(h)
    """

    def __init__(self, channels: int, num_classes: int, reg_max: int, act: str = "silu"):
        # 每分支一个 ESE + 1x1 stem、预测层用 3x3：l 规模下整模型约 52.2M 参数，
        # test_inspect_l_scale_matches_reference_size 卡着这个量级
        super().__init__()
        self.cls_ese = ESE(channels)
        self.cls_stem = ConvBN(channels, channels, 1, act=act)
        self.cls_pred = Conv(channels, num_classes, 3)
        self.reg_ese = ESE(channels)
        self.reg_stem = ConvBN(channels, channels, 1, act=act)
        self.reg_pred = Conv(channels, 4 * (reg_max + 1), 3)

    def init_cls_prior(self) -> None:
        self.cls_pred.bias.data[...] = -math.log((1.0 - CLS_PRIOR_PROB) / CLS_PRIOR_PROB)

    def forward(self, x: Tensor) -> LevelOutput:
        g = self.cls_ese(x)
        cls_logits = self.cls_pred(F.add(self.cls_stem(g), g))
        reg_logits = self.reg_pred(self.reg_stem(self.reg_ese(x)))
        return LevelOutput(cls_logits=cls_logits, reg_logits=reg_logits)


class ETHead(Module):
    def __init__(self, in_channels: Sequence[int], num_classes: int, reg_max: int, act: str = "silu"):
        super().__init__()
        self.levels = [ETHeadLevel(c, num_classes, reg_max, act=act) for c in in_channels]
        self.num_classes = num_classes
        self.reg_max = reg_max

    def init_cls_prior(self) -> None:
        for level in self.levels:
            level.init_cls_prior()

    def forward(self, feats: Sequence[Tensor]) -> list[LevelOutput]:
        return [level(f) for level, f in zip(self.levels, feats)]


def flatten_outputs(outputs: Sequence[LevelOutput], reg_max: int) -> tuple[Tensor, Tensor]:
    """
    多尺度输出按 level-major（stride 8 在前）、行优先展开成 anchor 维：
    cls [N, A, C]，reg [N, A, 4, reg_max+1]
    """
    cls_parts: list[Tensor] = []
    reg_parts: list[Tensor] = []
    bins = reg_max + 1
    for out in outputs:
        n, c, h, w = out.cls_logits.shape
        cls = F.transpose(F.reshape(out.cls_logits, (n, c, h * w)), (0, 2, 1))
        reg = F.reshape(out.reg_logits, (n, 4, bins, h * w))
        reg = F.transpose(reg, (0, 3, 1, 2))
        cls_parts.append(cls)
        reg_parts.append(reg)
    if len(cls_parts) == 1:
        return cls_parts[0], reg_parts[0]
    return F.concat(cls_parts, axis=1), F.concat(reg_parts, axis=1)
