# app/services/model/neck.py
from __future__ import annotations

from typing import Sequence

from services.model.blocks import ConvBN, CSPRepResStage, StageConfigError
from services.nn import functional as F
from services.nn.module import Module
from services.nn.tensor import Tensor


class PANNeck(Module):
    """
    PAN：自顶向下（1x1 route 减半 + 2x 上采样 + concat）再自底向上（3x3 stride-2 + concat）。
    in_channels / widths 都按 [P3, P4, P5] 排列；第一个自顶向下 stage 内含 SPP。
    neck 里的 stage 没有下采样、ESE 和捷径。
    """

    def __init__(self, in_channels: Sequence[int], widths: Sequence[int], depth: int, act: str = "silu"):
        super().__init__()
        if len(in_channels) != 3 or len(widths) != 3:
            raise StageConfigError("PAN neck works on exactly 3 levels")
        c3, c4, c5 = in_channels
        n0, n1, n2 = widths

        def stage(cin: int, cout: int, spp: bool = False) -> CSPRepResStage:
            return CSPRepResStage(cin, cout, depth, downsample=False, use_ese=False, shortcut=False, spp=spp, act=act)

        # top-down
        self.fpn_stages = [
            stage(c5, n2, spp=True),
            stage(n2 // 2 + c4, n1),
            stage(n1 // 2 + c3, n0),
        ]
        self.fpn_routes = [
            ConvBN(n2, n2 // 2, 1, act=act),
            ConvBN(n1, n1 // 2, 1, act=act),
        ]
        # bottom-up
        self.pan_downs = [
            ConvBN(n0, n0, 3, stride=2, act=act),
            ConvBN(n1, n1, 3, stride=2, act=act),
        ]
        self.pan_stages = [
            stage(n0 + n1, n1),
            stage(n1 + n2, n2),
        ]
        self.out_channels = [n0, n1, n2]

    def forward(self, feats: Sequence[Tensor]) -> list[Tensor]:
        c3, c4, c5 = feats
        f5 = self.fpn_stages[0](c5)
        r = F.upsample_nearest2x(self.fpn_routes[0](f5))
        f4 = self.fpn_stages[1](F.concat([r, c4], axis=1))
        r = F.upsample_nearest2x(self.fpn_routes[1](f4))
        p3 = self.fpn_stages[2](F.concat([r, c3], axis=1))

        d = self.pan_downs[0](p3)
        p4 = self.pan_stages[0](F.concat([d, f4], axis=1))
        d = self.pan_downs[1](p4)
        p5 = self.pan_stages[1](F.concat([d, f5], axis=1))
        return [p3, p4, p5]
