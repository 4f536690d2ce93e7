# app/services/postprocess/decode.py
from __future__ import annotations

import numpy as np
from scipy.special import softmax

from services.assign.types import AnchorPoints
from services.nn.tensor import DimensionError


def dfl_decode(bin_logits: np.ndarray) -> np.ndarray:
    """[P,4,R+1] -> [P,4]：每条边 sum_i i*softmax(bins)_i，单位 stride"""
    z = np.asarray(bin_logits, dtype=np.float64)
    if z.ndim < 2:
        raise DimensionError("dfl_decode", "logits", "[..., R+1]", z.shape)
    prob = softmax(z, axis=-1)
    return (prob * np.arange(z.shape[-1], dtype=np.float64)).sum(axis=-1)


def decode_boxes(
    points: AnchorPoints,
    distances: np.ndarray,
    image_size: tuple[int, int] | None = None,
    anchor_index: np.ndarray | None = None,
) -> np.ndarray:
    """
    (l,t,r,b) 距离 -> 像素框：x1 = cx - l*s, y1 = cy - t*s, x2 = cx + r*s, y2 = cy + b*s。
    image_size=(H, W) 时裁剪到图像内。anchor_index 给出 distances 每行对应的锚点。
    """
    d = np.asarray(distances, dtype=np.float64).reshape(-1, 4)
    idx = np.arange(points.num_points) if anchor_index is None else np.asarray(anchor_index)
    if idx.shape[0] != d.shape[0]:
        raise DimensionError("decode_boxes", "rows", idx.shape[0], d.shape[0])
    c = points.centers[idx]
    s = points.strides[idx][:, None]
    boxes = np.concatenate([c - d[:, :2] * s, c + d[:, 2:] * s], axis=1)
    if image_size is not None:
        h, w = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, float(w))
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, float(h))
    return boxes
