# app/services/assign/anchors.py
from __future__ import annotations

from typing import Sequence

import numpy as np

from services.assign.types import AnchorPoints
from services.nn.tensor import DimensionError


def generate_anchor_points(strides: Sequence[int], feat_shapes: Sequence[tuple[int, int]]) -> AnchorPoints:
    """中心 = ((j+0.5)*stride, (i+0.5)*stride)，level-major，层内行优先"""
    if len(strides) != len(feat_shapes):
        raise DimensionError("anchor_points", "levels", len(strides), len(feat_shapes))
    centers: list[np.ndarray] = []
    per_point: list[np.ndarray] = []
    for s, (h, w) in zip(strides, feat_shapes):
        if h < 1 or w < 1:
            raise DimensionError("anchor_points", "feature shape", ">= 1", (h, w))
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        c = np.stack([(xs.reshape(-1) + 0.5) * s, (ys.reshape(-1) + 0.5) * s], axis=1)
        centers.append(c)
        per_point.append(np.full(h * w, float(s)))
    return AnchorPoints(
        centers=np.concatenate(centers, axis=0),
        strides=np.concatenate(per_point, axis=0),
        level_shapes=tuple((int(h), int(w)) for h, w in feat_shapes),
        level_strides=tuple(int(s) for s in strides),
    )


def anchor_points_for_image(height: int, width: int, strides: Sequence[int] = (8, 16, 32)) -> AnchorPoints:
    if height % max(strides) or width % max(strides):
        raise DimensionError("anchor_points", "image size", f"divisible by {max(strides)}", (height, width))
    return generate_anchor_points(strides, [(height // s, width // s) for s in strides])
