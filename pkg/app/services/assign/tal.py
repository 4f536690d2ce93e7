# app/services/assign/tal.py
"""
Task-aligned 动态分配。

对每个 GT g：
1. 候选 = 中心严格落在 g 框内的 anchor
2. 对齐度 t = s^alpha * u^beta（s = g 类别上的预测分数，u = 预测框与 g 的 IoU）
3. 候选按 t 降序（同分取 anchor 下标小的）取前 topk 个
4. 被多个 GT 选中的 anchor 归 IoU 更大的 GT（同 IoU 取 GT 下标小的）
5. t_hat = t * max(u) / max(t)，max 在 g 最终的正样本上取；max(t) 为 0 时 t_hat 为 0
全程 float64。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from services.assign.iou import compute_iou_matrix
from services.assign.types import AnchorPoints, AssignmentResult, GroundTruth
from services.nn.tensor import ContractError, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TALConfig:
    topk: int = 13
    alpha_tal: float = 1.0
    beta_tal: float = 6.0

    def __post_init__(self) -> None:
        if self.topk < 1:
            raise ContractError(f"tal topk must be >= 1, got {self.topk}")
        if not (self.alpha_tal > 0 and self.beta_tal > 0):
            raise ContractError("tal exponents must be > 0")


def centers_inside(points: AnchorPoints, boxes: np.ndarray) -> np.ndarray:
    """[M, A]：anchor 中心是否严格在框内"""
    cx = points.centers[None, :, 0]
    cy = points.centers[None, :, 1]
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (cx > b[:, 0:1]) & (cx < b[:, 2:3]) & (cy > b[:, 1:2]) & (cy < b[:, 3:4])


def resolve_conflicts(claimed: np.ndarray, ious: np.ndarray) -> np.ndarray:
    """
    claimed: [M, A] bool；ious: [A, M]
    返回 owner[a]：IoU 最大的认领 GT（argmax 取第一个，即下标小的），无人认领为 -1
    """
    masked = np.where(claimed, ious.T, -1.0)
    owner = masked.argmax(axis=0)
    return np.where(claimed.any(axis=0), owner, -1)


def normalize_targets(owner: np.ndarray, metric: np.ndarray, ious: np.ndarray) -> np.ndarray:
    """metric/ious: [A, M]；每个 GT 在自己最终的正样本上做 t*max(u)/max(t)"""
    t_hat = np.zeros(owner.shape[0], dtype=np.float64)
    for m in np.unique(owner[owner >= 0]):
        pos = np.flatnonzero(owner == m)
        t = metric[pos, m]
        max_t = t.max()
        if max_t > 0:
            t_hat[pos] = t * (ious[pos, m].max() / max_t)
    return t_hat


def tal_assign(
    pred_scores: np.ndarray,
    pred_boxes: np.ndarray,
    points: AnchorPoints,
    gt: GroundTruth,
    cfg: TALConfig = TALConfig(),
) -> AssignmentResult:
    scores = np.asarray(pred_scores, dtype=np.float64)
    boxes = np.asarray(pred_boxes, dtype=np.float64)
    a = points.num_points
    if scores.ndim != 2 or scores.shape[0] != a:
        raise DimensionError("tal_assign", "pred_scores", f"[{a}, C]", scores.shape)
    if boxes.shape != (a, 4):
        raise DimensionError("tal_assign", "pred_boxes", (a, 4), boxes.shape)
    if gt.num_boxes == 0:
        return AssignmentResult.background(a)
    gt.validate_classes(scores.shape[1])

    ious = compute_iou_matrix(boxes, gt.boxes)  # [A, M]
    metric = scores[:, gt.classes] ** cfg.alpha_tal * ious**cfg.beta_tal  # [A, M]
    inside = centers_inside(points, gt.boxes)  # [M, A]

    claimed = np.zeros_like(inside)
    unmatched: list[int] = []
    for m in range(gt.num_boxes):
        cand = np.flatnonzero(inside[m])
        if cand.size == 0:
            unmatched.append(m)
            logger.debug(f"[tal] GT 内没有锚点中心. gt={m}, box={gt.boxes[m].tolist()}")
            continue
        order = cand[np.argsort(-metric[cand, m], kind="stable")]
        claimed[m, order[: cfg.topk]] = True

    owner = resolve_conflicts(claimed, ious)
    t_hat = normalize_targets(owner, metric, ious)
    return AssignmentResult.from_owners(owner, gt, t_hat, unmatched)
