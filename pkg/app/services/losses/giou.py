# app/services/losses/giou.py
from __future__ import annotations

import numpy as np

from services.nn import functional as F
from services.nn.tensor import DimensionError, Tensor


def giou_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """
    sum_i w_i * (1 - GIoU(pred_i, target_i))，GIoU = IoU - |C \\ (A u B)| / |C|。
    预测框退化（x2 <= x1）时交集按 0 计；目标框必须合法。
    """
    if pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError("giou_loss", "pred", "[P, 4]", pred.shape)
    p = pred.shape[0]
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != (p, 4):
        raise DimensionError("giou_loss", "target", (p, 4), t.shape)
    w = np.ones((p, 1)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(p, 1)

    px1, py1, px2, py2 = (F.column(pred, j) for j in range(4))
    tx1, ty1, tx2, ty2 = (t[:, j : j + 1] for j in range(4))

    iw = F.clamp(F.minimum_const(px2, tx2) - F.maximum_const(px1, tx1), lo=0.0)
    ih = F.clamp(F.minimum_const(py2, ty2) - F.maximum_const(py1, ty1), lo=0.0)
    inter = iw * ih
    area_p = F.clamp(px2 - px1, lo=0.0) * F.clamp(py2 - py1, lo=0.0)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = F.add_const(area_p - inter, area_t)
    iou = F.div(inter, union)

    cw = F.maximum_const(px2, tx2) - F.minimum_const(px1, tx1)
    ch = F.maximum_const(py2, ty2) - F.minimum_const(py1, ty1)
    enclose = cw * ch
    giou = iou - F.div(enclose - union, enclose)
    per = F.add_const(F.neg(giou), 1.0)
    return F.sum(F.mul_const(per, w))


def giou_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """逐对 GIoU，测试和诊断用"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    enclose = (np.maximum(a[:, 2], b[:, 2]) - np.minimum(a[:, 0], b[:, 0])) * (
        np.maximum(a[:, 3], b[:, 3]) - np.minimum(a[:, 1], b[:, 1])
    )
    return inter / union - (enclose - union) / enclose
