# app/services/assign/fcos.py
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from services.assign.iou import box_area
from services.assign.types import AnchorPoints, AssignmentResult, GroundTruth
from services.nn.tensor import ContractError

logger = logging.getLogger(__name__)

# 320 像素输入下三层的 max(w,h) 区间 (lo, hi]
DEFAULT_RANGES: tuple[tuple[float, float], ...] = ((0.0, 32.0), (32.0, 64.0), (64.0, math.inf))


def check_ranges(ranges: Sequence[tuple[float, float]]) -> None:
    if not ranges or ranges[0][0] != 0 or not math.isinf(ranges[-1][1]):
        raise ContractError(f"level ranges must cover (0, inf), got {list(ranges)}")
    for (lo, hi), (lo2, _) in zip(ranges, ranges[1:]):
        if not lo < hi or hi != lo2:
            raise ContractError(f"level ranges must be increasing and contiguous, got {list(ranges)}")


def fcos_assign(
    points: AnchorPoints,
    gt: GroundTruth,
    ranges: Sequence[tuple[float, float]] = DEFAULT_RANGES,
) -> AssignmentResult:
    """
    静态分配：GT 按 max(w,h) 落到 (lo,hi] 所在层，取该层离 GT 中心最近的锚点（同距离取下标小的）。
    一个锚点被多个 GT 选中时归面积小的 GT（同面积取 GT 下标小的）。正样本 t_hat = 1。
    """
    check_ranges(ranges)
    if len(ranges) != len(points.level_shapes):
        raise ContractError(f"{len(ranges)} ranges for {len(points.level_shapes)} levels")
    a = points.num_points
    if gt.num_boxes == 0:
        return AssignmentResult.background(a)

    slices = points.level_slices()
    areas = box_area(gt.boxes)
    owner = np.full(a, -1, dtype=np.int64)
    for m in range(gt.num_boxes):
        x1, y1, x2, y2 = gt.boxes[m]
        size = max(x2 - x1, y2 - y1)
        level = next(i for i, (lo, hi) in enumerate(ranges) if lo < size <= hi)
        sl = slices[level]
        c = points.centers[sl]
        d2 = (c[:, 0] - 0.5 * (x1 + x2)) ** 2 + (c[:, 1] - 0.5 * (y1 + y2)) ** 2
        anchor = sl.start + int(np.argmin(d2))
        prev = owner[anchor]
        if prev < 0 or areas[m] < areas[prev]:
            owner[anchor] = m
    t_hat = (owner >= 0).astype(np.float64)
    return AssignmentResult.from_owners(owner, gt, t_hat)
