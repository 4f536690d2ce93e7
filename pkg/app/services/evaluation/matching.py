# app/services/evaluation/matching.py
from __future__ import annotations

from typing import Sequence

import numpy as np

from services.assign.iou import compute_iou_matrix
from services.assign.types import GroundTruth
from services.postprocess.nms import Detection, sort_order


def match_detections(dets: Sequence[Detection], gt: GroundTruth, iou_thr: float) -> np.ndarray:
    """
    贪心匹配，按分数降序（同分原始下标小的先）：
    每个检测匹配 IoU >= iou_thr 的、同类别、尚未被匹配的 GT 中 IoU 最大的那个（同 IoU 取下标小的）。
    返回与输入顺序对齐的 TP 标志。
    """
    n = len(dets)
    flags = np.zeros(n, dtype=bool)
    if n == 0 or gt.num_boxes == 0:
        return flags
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    ious = compute_iou_matrix(boxes, gt.boxes)
    taken = np.zeros(gt.num_boxes, dtype=bool)
    for i in sort_order(scores):
        ok = (gt.classes == classes[i]) & ~taken & (ious[i] >= iou_thr)
        if not ok.any():
            continue
        j = int(np.argmax(np.where(ok, ious[i], -1.0)))
        taken[j] = True
        flags[i] = True
    return flags
