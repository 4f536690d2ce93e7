# app/services/losses/composite.py
"""
总损失：
    total = (w_vfl * vfl + w_giou * giou + w_dfl * dfl) / max(sum(t_hat), 1)
- vfl：所有 anchor、所有类别，IACS 目标 q[a, cls(a)] = t_hat[a]
- giou / dfl：只在正样本上，按 t_hat 加权
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, softmax

from services.assign.tal import TALConfig, tal_assign
from services.assign.fcos import DEFAULT_RANGES, fcos_assign
from services.assign.types import AnchorPoints, AssignmentResult, GroundTruth
from services.losses.dfl import distribution_focal_loss
from services.losses.giou import giou_loss
from services.losses.vfl import varifocal_loss
from services.nn import functional as F
from services.nn.tensor import ContractError, DimensionError, Tensor

logger = logging.getLogger(__name__)

NORMALIZER_FLOOR = 1.0
DFL_TARGET_MARGIN = 0.01


@dataclass(frozen=True)
class LossWeights:
    w_vfl: float = 1.0
    w_giou: float = 2.5
    w_dfl: float = 0.5
    alpha_vfl: float = 0.75
    gamma_vfl: float = 2.0

    def __post_init__(self) -> None:
        if min(self.w_vfl, self.w_giou, self.w_dfl) < 0:
            raise ContractError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    total: Tensor
    vfl: float
    giou: float
    dfl: float
    normalizer: float
    num_positives: int

    def as_dict(self) -> dict[str, float]:
        return {
            "loss": float(self.total.item()),
            "vfl": self.vfl,
            "giou": self.giou,
            "dfl": self.dfl,
            "normalizer": self.normalizer,
        }


def _zero() -> Tensor:
    return Tensor(np.asarray(0.0))


def decode_pred_boxes(bins: Tensor, centers: np.ndarray, strides: np.ndarray) -> Tensor:
    """可求导的解码：期望距离 [P,4]（stride 单位）-> 像素框 [P,4]，训练时不裁剪"""
    p, _, nb = bins.shape
    dist = F.sum(F.mul_const(F.softmax(bins, axis=-1), np.arange(nb, dtype=np.float64)), axis=-1)
    s = np.asarray(strides, dtype=np.float64).reshape(p, 1)
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    c = np.asarray(centers, dtype=np.float64)
    offset = np.concatenate([c, c], axis=1)
    return F.add_const(F.mul_const(dist, sign * s), offset)


def box_to_distances(boxes: np.ndarray, centers: np.ndarray, strides: np.ndarray) -> np.ndarray:
    """像素框 -> (l, t, r, b)，stride 单位"""
    b = np.asarray(boxes, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    s = np.asarray(strides, dtype=np.float64).reshape(-1, 1)
    ltrb = np.stack([c[:, 0] - b[:, 0], c[:, 1] - b[:, 1], b[:, 2] - c[:, 0], b[:, 3] - c[:, 1]], axis=1)
    return ltrb / s


def detached_predictions(
    cls_logits: np.ndarray, reg_logits: np.ndarray, points: AnchorPoints
) -> tuple[np.ndarray, np.ndarray]:
    """numpy 版的分数和框（[A,C], [A,4]），给分配器用"""
    scores = expit(cls_logits.astype(np.float64))
    prob = softmax(reg_logits.astype(np.float64), axis=-1)
    dist = (prob * np.arange(reg_logits.shape[-1])).sum(axis=-1)
    s = points.strides[:, None]
    c = points.centers
    boxes = np.concatenate([c - dist[:, :2] * s, c + dist[:, 2:] * s], axis=1)
    return scores, boxes


Assigner = Callable[[np.ndarray, np.ndarray, AnchorPoints, GroundTruth], AssignmentResult]


def make_assigner(kind: str, tal_cfg: TALConfig = TALConfig()) -> Assigner:
    if kind == "tal":
        return lambda scores, boxes, points, gt: tal_assign(scores, boxes, points, gt, tal_cfg)
    if kind == "fcos":
        return lambda scores, boxes, points, gt: fcos_assign(points, gt, DEFAULT_RANGES)
    raise ValueError(f"unknown assigner: {kind}")


def assign_batch(
    cls_logits: Tensor,
    reg_logits: Tensor,
    points: AnchorPoints,
    gts: Sequence[GroundTruth],
    assigner: Assigner,
) -> list[AssignmentResult]:
    """用当前（detach 后的）预测逐图分配"""
    results: list[AssignmentResult] = []
    for i, gt in enumerate(gts):
        scores, boxes = detached_predictions(cls_logits.data[i], reg_logits.data[i], points)
        results.append(assigner(scores, boxes, points, gt))
    return results


def composite_loss(
    cls_logits: Tensor,
    reg_logits: Tensor,
    assignments: Sequence[AssignmentResult],
    points: AnchorPoints,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """
    cls_logits [N,A,C]，reg_logits [N,A,4,R+1]，assignments 每张图一个。
    """
    if cls_logits.ndim != 3 or reg_logits.ndim != 4:
        raise DimensionError("composite_loss", "head outputs", "[N,A,C] / [N,A,4,R+1]", (cls_logits.shape, reg_logits.shape))
    n, a, c = cls_logits.shape
    bins = reg_logits.shape[-1]
    reg_max = bins - 1
    if len(assignments) != n or points.num_points != a:
        raise DimensionError("composite_loss", "anchors", (n, a), (len(assignments), points.num_points))

    q = np.zeros((n * a, c), dtype=np.float64)
    pos_idx: list[np.ndarray] = []
    target_boxes: list[np.ndarray] = []
    t_pos: list[np.ndarray] = []
    for i, res in enumerate(assignments):
        pos = np.flatnonzero(res.positive_mask)
        q[i * a + pos, res.assigned_class[pos]] = res.t_hat[pos]
        pos_idx.append(i * a + pos)
        target_boxes.append(res.target_box[pos])
        t_pos.append(res.t_hat[pos])
    pos_all = np.concatenate(pos_idx)
    t_all = np.concatenate(t_pos)
    normalizer = max(float(t_all.sum()), NORMALIZER_FLOOR)

    probs = F.sigmoid(F.reshape(cls_logits, (n * a, c)))
    vfl = varifocal_loss(probs, q, weights.alpha_vfl, weights.gamma_vfl)

    if pos_all.size == 0:
        giou = _zero()
        dfl = _zero()
    else:
        anchor_of = pos_all % a
        centers = points.centers[anchor_of]
        strides = points.strides[anchor_of]
        pos_bins = F.take(F.reshape(reg_logits, (n * a, 4, bins)), pos_all, axis=0)
        tboxes = np.concatenate(target_boxes, axis=0)
        pred_boxes = decode_pred_boxes(pos_bins, centers, strides)
        giou = giou_loss(pred_boxes, tboxes, t_all)
        dist_target = np.clip(box_to_distances(tboxes, centers, strides), 0.0, reg_max - DFL_TARGET_MARGIN)
        dfl = distribution_focal_loss(pos_bins, dist_target, t_all)

    total = F.mul_const(
        F.mul_const(vfl, weights.w_vfl) + F.mul_const(giou, weights.w_giou) + F.mul_const(dfl, weights.w_dfl),
        1.0 / normalizer,
    )
    return LossBreakdown(
        total=total,
        vfl=float(vfl.item()),
        giou=float(giou.item()),
        dfl=float(dfl.item()),
        normalizer=normalizer,
        num_positives=int(pos_all.size),
    )
