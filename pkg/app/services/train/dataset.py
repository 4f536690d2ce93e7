# app/services/train/dataset.py
"""
合成检测数据：噪声背景上画彩色矩形 / 椭圆 / 三角形，形状类型就是类别。
GT 框取自该形状自己的栅格化 mask（后画的形状可以遮挡先画的）。
每个场景用 default_rng([seed, index]) 单独生成，顺序和线程数都不影响结果。
"""
from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.assign.iou import compute_iou_matrix
from services.assign.types import GroundTruth
from services.nn.tensor import ContractError

logger = logging.getLogger(__name__)

CLASS_NAMES: tuple[str, ...] = ("rectangle", "ellipse", "triangle")
NUM_CLASSES = len(CLASS_NAMES)
MIN_OBJECT_PX = 8
MAX_OBJECTS = 5
VAL_SEED_OFFSET = 1_000_003
_PLACEMENT_TRIES = 20
_MAX_OVERLAP_IOU = 0.3


@dataclass(frozen=True)
class ShapeSpec:
    """
    kind: rectangle -> params (x1, y1, x2, y2)
          ellipse   -> params (cx, cy, rx, ry)
          triangle  -> params (ax, ay, bx, by, cx, cy)
    坐标单位是像素，像素 (i, j) 的中心在 (j+0.5, i+0.5)
    """

    kind: str
    params: tuple[float, ...]
    color: tuple[float, float, float]

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.kind)


@dataclass
class SynthScene:
    image: np.ndarray  # [3, S, S] float32, [0, 1]
    gt: GroundTruth
    shapes: list[ShapeSpec] = field(default_factory=list)
    index: int = 0

    @property
    def size(self) -> int:
        return int(self.image.shape[-1])


def shape_mask(spec: ShapeSpec, size: int) -> np.ndarray:
    """在像素中心上判定是否落在形状内，返回 [S, S] bool"""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    p = spec.params
    if spec.kind == "rectangle":
        x1, y1, x2, y2 = p
        return (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if spec.kind == "ellipse":
        cx, cy, rx, ry = p
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if spec.kind == "triangle":
        ax, ay, bx, by, cx, cy = p

        def edge(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
            return (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)

        e0, e1, e2 = edge(ax, ay, bx, by), edge(bx, by, cx, cy), edge(cx, cy, ax, ay)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ContractError(f"unknown shape kind: {spec.kind}")


def mask_box(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _random_shape(rng: np.random.Generator, size: int, kind: str) -> ShapeSpec:
    hi = max(MIN_OBJECT_PX + 1, int(size * 0.4))
    w = int(np.exp(rng.uniform(np.log(max(12, MIN_OBJECT_PX)), np.log(hi))))
    h = int(np.clip(w * np.exp(rng.uniform(-0.4, 0.4)), MIN_OBJECT_PX, hi))
    w = max(MIN_OBJECT_PX, w)
    x1 = int(rng.integers(0, size - w + 1))
    y1 = int(rng.integers(0, size - h + 1))
    color = tuple(float(c) for c in rng.uniform(0.45, 1.0, size=3))
    if kind == "rectangle":
        params: tuple[float, ...] = (x1, y1, x1 + w, y1 + h)
    elif kind == "ellipse":
        # 整数半轴 + 偶数直径，让 mask 的外接框正好是 [x1, x1+w)
        w2, h2 = w - (w % 2), h - (h % 2)
        params = (x1 + w2 / 2, y1 + h2 / 2, w2 / 2, h2 / 2)
    else:
        apex = float(rng.uniform(x1, x1 + w))
        params = (apex, float(y1), float(x1), float(y1 + h), float(x1 + w), float(y1 + h))
        if rng.random() < 0.5:  # 倒三角
            params = (apex, float(y1 + h), float(x1), float(y1), float(x1 + w), float(y1))
    return ShapeSpec(kind=kind, params=tuple(float(v) for v in params), color=color)  # type: ignore[arg-type]


def render_scene(shapes: Sequence[ShapeSpec], size: int, rng: np.random.Generator) -> tuple[np.ndarray, GroundTruth]:
    base = rng.uniform(0.05, 0.3, size=(3, 1, 1))
    image = np.clip(base + rng.normal(0.0, 0.04, size=(3, size, size)), 0.0, 1.0)
    boxes: list[tuple[float, float, float, float]] = []
    classes: list[int] = []
    for spec in shapes:
        mask = shape_mask(spec, size)
        box = mask_box(mask)
        if box is None:
            continue
        image[:, mask] = np.asarray(spec.color)[:, None]
        boxes.append(box)
        classes.append(spec.class_id)
    gt = GroundTruth(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64))
    return image.astype(np.float32), gt


def generate_scene(seed: int, index: int, size: int) -> SynthScene:
    rng = np.random.default_rng([seed, index])
    n_obj = int(rng.integers(1, MAX_OBJECTS + 1))
    shapes: list[ShapeSpec] = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(n_obj):
        kind = CLASS_NAMES[int(rng.integers(0, NUM_CLASSES))]
        spec = _random_shape(rng, size, kind)
        for _ in range(_PLACEMENT_TRIES):
            box = mask_box(shape_mask(spec, size))
            # 三角形顶点那一行可能一个像素中心都不含，栅格化后的框会比 w/h 小一圈
            if box is not None and min(box[2] - box[0], box[3] - box[1]) >= MIN_OBJECT_PX and (
                not placed or compute_iou_matrix(np.asarray([box]), np.asarray(placed)).max() <= _MAX_OVERLAP_IOU
            ):
                break
            spec = _random_shape(rng, size, kind)
        else:
            continue
        shapes.append(spec)
        placed.append(box)
    image, gt = render_scene(shapes, size, rng)
    return SynthScene(image=image, gt=gt, shapes=shapes, index=index)


def generate_dataset(seed: int, n: int, size: int, executor: Executor | None = None) -> list[SynthScene]:
    """同一个 seed 生成的像素完全相同；可以交给线程池并行渲染"""
    if size % 32:
        raise ContractError(f"scene size must be divisible by 32, got {size}")
    if executor is None:
        scenes = [generate_scene(seed, i, size) for i in range(n)]
    else:
        scenes = list(executor.map(lambda i: generate_scene(seed, i, size), range(n)))
    n_obj = sum(s.gt.num_boxes for s in scenes)
    logger.info(f"[dataset] 生成完成. seed={seed}, scenes={n}, size={size}, objects={n_obj}")
    return scenes


def generate_splits(
    seed: int, n_train: int, n_val: int, size: int, executor: Executor | None = None
) -> tuple[list[SynthScene], list[SynthScene]]:
    """验证集用 seed + VAL_SEED_OFFSET，和训练集不重叠"""
    return (
        generate_dataset(seed, n_train, size, executor),
        generate_dataset(seed + VAL_SEED_OFFSET, n_val, size, executor),
    )


def class_counts(scenes: Sequence[SynthScene]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in scenes:
        np.add.at(counts, s.gt.classes, 1)
    return counts
