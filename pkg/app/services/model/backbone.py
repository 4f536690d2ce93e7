# app/services/model/backbone.py
from __future__ import annotations

from typing import Sequence

from services.model.blocks import ConvBN, CSPRepResStage, StageConfigError
from services.nn.module import Module
from services.nn.tensor import Tensor


class CSPRepResNet(Module):
    """
    stem（3 个 3x3 ConvBN，步长 2/1/1）+ 4 个带下采样的 CSPRepResStage。
    输出后三个 stage 的特征（stride 8/16/32）。
    """

    def __init__(self, widths: Sequence[int], depths: Sequence[int], act: str = "silu"):
        super().__init__()
        if len(widths) != 5 or len(depths) != 4:
            raise StageConfigError(f"backbone needs 5 widths and 4 depths, got {len(widths)}/{len(depths)}")
        w0 = widths[0]
        self.stem = [
            ConvBN(3, w0 // 2, 3, stride=2, act=act),
            ConvBN(w0 // 2, w0 // 2, 3, stride=1, act=act),
            ConvBN(w0 // 2, w0, 3, stride=1, act=act),
        ]
        self.stages = [
            CSPRepResStage(widths[i], widths[i + 1], depths[i], downsample=True, use_ese=True, shortcut=True, act=act)
            for i in range(4)
        ]
        self.out_channels = list(widths[2:])

    def forward(self, x: Tensor) -> list[Tensor]:
        for conv in self.stem:
            x = conv(x)
        outs: list[Tensor] = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                outs.append(x)
        return outs
