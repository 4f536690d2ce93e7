# app/services/evaluation/ap.py
"""
COCO 风格 AP：101 点插值，精度取单调包络，IoU 阈值 0.50:0.05:0.95。
只对至少有一个 GT 的类别求平均。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from services.assign.types import GroundTruth
from services.evaluation.matching import match_detections
from services.postprocess.nms import Detection

logger = logging.getLogger(__name__)

IOU_THRESHOLDS: tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    per_class_ap50: dict[int, float] = field(default_factory=dict)
    num_gt: int = 0
    num_detections: int = 0

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }
        for c in sorted(self.per_class_ap):
            out[f"ap_class_{c}"] = self.per_class_ap[c]
            out[f"ap50_class_{c}"] = self.per_class_ap50[c]
        return out


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """tp 已按分数降序排好；101 点插值"""
    if num_gt <= 0:
        return 0.0
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp, dtype=np.float64)
    fps = np.cumsum(~tp, dtype=np.float64)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(RECALL_POINTS.size)
    hit = idx < recall.size
    q[hit] = precision[idx[hit]]
    return float(q.mean())


def compute_ap(
    scores: Mapping[int, np.ndarray],
    flags: Mapping[float, Mapping[int, np.ndarray]],
    gt_counts: Mapping[int, int],
) -> EvalResult:
    """
    scores[c]：类别 c 的全部检测分数（已全局排好序）
    flags[iou][c]：同顺序的 TP 标志
    gt_counts[c]：类别 c 的 GT 数
    """
    classes = sorted(c for c, n in gt_counts.items() if n > 0)
    total_gt = int(sum(gt_counts.values()))
    n_det = int(sum(len(s) for s in scores.values()))
    if not classes:
        logger.warning("[evaluation] 没有任何 GT，AP 记为 0")
        return EvalResult(ap=0.0, ap50=0.0, ap75=0.0, num_gt=0, num_detections=n_det)

    table = np.zeros((len(IOU_THRESHOLDS), len(classes)))
    empty = np.zeros(0, dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        per_thr = flags.get(thr, {})
        for ci, c in enumerate(classes):
            table[ti, ci] = average_precision(per_thr.get(c, empty), gt_counts[c])

    i50 = IOU_THRESHOLDS.index(0.5)
    i75 = IOU_THRESHOLDS.index(0.75)
    return EvalResult(
        ap=float(table.mean()),
        ap50=float(table[i50].mean()),
        ap75=float(table[i75].mean()),
        per_class_ap={c: float(table[:, ci].mean()) for ci, c in enumerate(classes)},
        per_class_ap50={c: float(table[i50, ci]) for ci, c in enumerate(classes)},
        num_gt=total_gt,
        num_detections=n_det,
    )


def evaluate_detections(
    detections: Mapping[int, Sequence[Detection]],
    ground_truths: Mapping[int, GroundTruth],
) -> EvalResult:
    """
    逐图匹配后按类别汇总。全局排序键：(-score, image_id, 图内下标)，与检测列表的输入方式无关。
    没有 GT 记录的 image_id 按空 GT 处理（检测全是 FP）。
    """
    iou_thresholds = IOU_THRESHOLDS
    gt_counts: dict[int, int] = {}
    for gt in ground_truths.values():
        for c in gt.classes.tolist():
            gt_counts[c] = gt_counts.get(c, 0) + 1

    # (score, image_id, index, class)
    keys: list[tuple[float, int, int, int]] = []
    per_image_flags: dict[float, dict[int, np.ndarray]] = {thr: {} for thr in iou_thresholds}
    for image_id in sorted(set(detections) | set(ground_truths)):
        dets = list(detections.get(image_id, ()))
        gt = ground_truths.get(image_id, GroundTruth.empty())
        for thr in iou_thresholds:
            per_image_flags[thr][image_id] = match_detections(dets, gt, thr)
        keys.extend((d.score, image_id, i, d.class_id) for i, d in enumerate(dets))

    keys.sort(key=lambda k: (-k[0], k[1], k[2]))
    scores: dict[int, list[float]] = {}
    flags: dict[float, dict[int, list[bool]]] = {thr: {} for thr in iou_thresholds}
    for score, image_id, i, c in keys:
        scores.setdefault(c, []).append(score)
        for thr in iou_thresholds:
            flags[thr].setdefault(c, []).append(bool(per_image_flags[thr][image_id][i]))

    result = compute_ap(
        {c: np.asarray(v) for c, v in scores.items()},
        {thr: {c: np.asarray(v, dtype=bool) for c, v in fc.items()} for thr, fc in flags.items()},
        gt_counts,
    )
    logger.info(
        f"[evaluation] 评估完成. images={len(ground_truths)}, gt={result.num_gt}, "
        f"dets={result.num_detections}, ap={result.ap:.4f}, ap50={result.ap50:.4f}"
    )
    return result
