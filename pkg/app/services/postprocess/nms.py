# app/services/postprocess/nms.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.assign.iou import compute_iou_matrix


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def sort_order(scores: np.ndarray) -> np.ndarray:
    """分数降序，同分时原始下标小的在前"""
    return np.lexsort((np.arange(scores.shape[0]), -np.asarray(scores, dtype=np.float64)))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """
    按类别的贪心 NMS，返回保留的原始下标（按分数降序）。
    被保留框抑制的条件：同类且 IoU > iou_threshold。
    """
    n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = sort_order(scores)
    keep: list[int] = []
    suppressed = np.zeros(n, dtype=bool)
    boxes = np.asarray(boxes, dtype=np.float64)
    classes = np.asarray(classes)
    for cls in np.unique(classes):
        members = order[classes[order] == cls]
        ious = compute_iou_matrix(boxes[members], boxes[members])
        alive = np.ones(members.size, dtype=bool)
        for i in range(members.size):
            if not alive[i]:
                continue
            alive[i + 1 :] &= ~(ious[i, i + 1 :] > iou_threshold)
        suppressed[members[~alive]] = True
    keep_mask = ~suppressed
    keep = [int(i) for i in order if keep_mask[i]]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_threshold)]
