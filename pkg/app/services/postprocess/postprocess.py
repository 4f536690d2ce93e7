# app/services/postprocess/postprocess.py
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from services.assign.types import AnchorPoints
from services.postprocess.decode import decode_boxes, dfl_decode
from services.postprocess.nms import Detection, nms_indices, sort_order
from services.nn.tensor import ContractError, DimensionError

logger = logging.getLogger(__name__)

MIN_BOX_SIDE = 1e-6


@dataclass(frozen=True)
class PostprocessConfig:
    conf_threshold: float = 0.01
    nms_threshold: float = 0.6
    max_detections: int = 300

    def __post_init__(self) -> None:
        if not (0.0 <= self.conf_threshold < 1.0):
            raise ContractError(f"conf_threshold must be in [0, 1), got {self.conf_threshold}")
        if not (0.0 < self.nms_threshold <= 1.0):
            raise ContractError(f"nms_threshold must be in (0, 1], got {self.nms_threshold}")
        if self.max_detections < 1:
            raise ContractError(f"max_detections must be >= 1, got {self.max_detections}")


def postprocess(
    cls_logits: np.ndarray,
    reg_logits: np.ndarray,
    points: AnchorPoints,
    image_size: tuple[int, int],
    cfg: PostprocessConfig = PostprocessConfig(),
) -> list[Detection]:
    """
    单张图：cls_logits [A,C]，reg_logits [A,4,R+1]。
    sigmoid 分数 > conf -> 解码并裁剪 -> 去掉退化框 -> 按类 NMS -> 按分数截断到 max_detections。
    """
    a = points.num_points
    if cls_logits.ndim != 2 or cls_logits.shape[0] != a:
        raise DimensionError("postprocess", "cls_logits", f"[{a}, C]", cls_logits.shape)
    if reg_logits.ndim != 3 or reg_logits.shape[:2] != (a, 4):
        raise DimensionError("postprocess", "reg_logits", f"[{a}, 4, R+1]", reg_logits.shape)

    scores = expit(cls_logits.astype(np.float64))
    anchor_idx, class_idx = np.nonzero(scores > cfg.conf_threshold)
    if anchor_idx.size == 0:
        return []
    cand_scores = scores[anchor_idx, class_idx]

    uniq, inverse = np.unique(anchor_idx, return_inverse=True)
    boxes_u = decode_boxes(points, dfl_decode(reg_logits[uniq]), image_size=image_size, anchor_index=uniq)
    boxes = boxes_u[inverse]

    valid = ((boxes[:, 2] - boxes[:, 0]) > MIN_BOX_SIDE) & ((boxes[:, 3] - boxes[:, 1]) > MIN_BOX_SIDE)
    boxes, cand_scores, class_idx = boxes[valid], cand_scores[valid], class_idx[valid]
    if cand_scores.size == 0:
        return []

    if cfg.nms_threshold >= 1.0:
        keep = sort_order(cand_scores)
    else:
        keep = nms_indices(boxes, cand_scores, class_idx, cfg.nms_threshold)
    keep = keep[: cfg.max_detections]
    return [
        Detection(box=tuple(float(v) for v in boxes[i]), class_id=int(class_idx[i]), score=float(cand_scores[i]))
        for i in keep
    ]
