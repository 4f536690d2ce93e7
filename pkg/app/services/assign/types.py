# app/services/assign/types.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.nn.tensor import ContractError

BACKGROUND = -1


@dataclass(frozen=True)
class AnchorPoints:
    """
    每个特征图像素一个锚点，level-major（stride 8 在前），层内行优先。
    centers: [A, 2] (cx, cy)，单位像素；strides: [A]
    """

    centers: np.ndarray
    strides: np.ndarray
    level_shapes: tuple[tuple[int, int], ...]
    level_strides: tuple[int, ...]

    @property
    def num_points(self) -> int:
        return int(self.centers.shape[0])

    def level_slices(self) -> list[slice]:
        out: list[slice] = []
        start = 0
        for h, w in self.level_shapes:
            out.append(slice(start, start + h * w))
            start += h * w
        return out


@dataclass
class GroundTruth:
    boxes: np.ndarray  # [M, 4] x1,y1,x2,y2
    classes: np.ndarray  # [M]

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.classes.shape[0]:
            raise ContractError(f"{self.boxes.shape[0]} boxes but {self.classes.shape[0]} classes")
        if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
            raise ContractError("ground-truth boxes need x2 > x1 and y2 > y1")
        if np.any(self.classes < 0):
            raise ContractError("class ids must be >= 0")

    @property
    def num_boxes(self) -> int:
        return int(self.boxes.shape[0])

    def validate_classes(self, num_classes: int) -> None:
        if np.any(self.classes >= num_classes):
            raise ContractError(f"class id out of range [0, {num_classes})")

    @classmethod
    def empty(cls) -> "GroundTruth":
        return cls(np.zeros((0, 4)), np.zeros((0,), dtype=np.int64))


@dataclass
class AssignmentResult:
    assigned_class: np.ndarray  # [A] int, BACKGROUND 表示背景
    assigned_gt: np.ndarray  # [A] int, -1 表示背景
    target_box: np.ndarray  # [A, 4]
    t_hat: np.ndarray  # [A] in [0, 1]
    positive_mask: np.ndarray  # [A] bool
    unmatched_gts: list[int] = field(default_factory=list)

    @property
    def num_positives(self) -> int:
        return int(self.positive_mask.sum())

    @classmethod
    def background(cls, num_anchors: int) -> "AssignmentResult":
        return cls(
            assigned_class=np.full(num_anchors, BACKGROUND, dtype=np.int64),
            assigned_gt=np.full(num_anchors, -1, dtype=np.int64),
            target_box=np.zeros((num_anchors, 4), dtype=np.float64),
            t_hat=np.zeros(num_anchors, dtype=np.float64),
            positive_mask=np.zeros(num_anchors, dtype=bool),
        )

    @classmethod
    def from_owners(
        cls,
        owner: np.ndarray,
        gt: GroundTruth,
        t_hat: np.ndarray,
        unmatched: Sequence[int] = (),
    ) -> "AssignmentResult":
        """owner[a] = 负责 anchor a 的 GT 下标（-1 为背景）"""
        res = cls.background(owner.shape[0])
        pos = owner >= 0
        res.positive_mask = pos
        res.assigned_gt = owner.astype(np.int64)
        res.assigned_class[pos] = gt.classes[owner[pos]]
        res.target_box[pos] = gt.boxes[owner[pos]]
        res.t_hat = np.where(pos, t_hat, 0.0)
        res.unmatched_gts = list(unmatched)
        return res
