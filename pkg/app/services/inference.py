# app/services/inference.py
"""
推理与评估的公共流程：批量前向 -> 逐图后处理 -> （可选）AP 评估
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from services.assign.anchors import anchor_points_for_image
from services.evaluation.ap import EvalResult, evaluate_detections
from services.model.detector import DetectorModel
from services.nn.tensor import DimensionError, Tensor, no_grad
from services.postprocess.nms import Detection
from services.postprocess.postprocess import PostprocessConfig, postprocess
from services.train.dataset import SynthScene
from utils.time import Stopwatch

logger = logging.getLogger(__name__)


def load_images(path: str | Path) -> np.ndarray:
    """读取 .npy 图像：[N,3,H,W] 或 [3,H,W]，H/W 必须是 32 的倍数"""
    arr = np.load(Path(path), allow_pickle=False)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise DimensionError("load_images", "array", "[N,3,H,W] or [3,H,W]", arr.shape)
    if arr.shape[2] % 32 or arr.shape[3] % 32:
        raise DimensionError("load_images", "spatial size", "divisible by 32", arr.shape[2:])
    return np.asarray(arr, dtype=np.float32)


def predict(
    model: DetectorModel,
    images: np.ndarray,
    cfg: PostprocessConfig = PostprocessConfig(),
    batch_size: int = 4,
) -> list[list[Detection]]:
    """images [N,3,H,W]；返回每张图的检测结果，顺序与输入一致"""
    model.eval()
    n, _, h, w = images.shape
    points = anchor_points_for_image(h, w, model.cfg.strides)
    out: list[list[Detection]] = []
    watch = Stopwatch()
    with no_grad():
        for start in range(0, n, batch_size):
            cls, reg, _ = model.forward_flat(Tensor(images[start : start + batch_size]))
            for i in range(cls.shape[0]):
                out.append(postprocess(cls.data[i], reg.data[i], points, (h, w), cfg))
    logger.info(
        f"[inference] 完成. images={n}, size={h}x{w}, dets={sum(len(d) for d in out)}, "
        f"cost={watch.elapsed_ms():.0f}ms"
    )
    return out


def evaluate_model(
    model: DetectorModel,
    scenes: Sequence[SynthScene],
    cfg: PostprocessConfig = PostprocessConfig(),
    batch_size: int = 4,
) -> tuple[EvalResult, dict[int, list[Detection]]]:
    images = np.stack([s.image for s in scenes])
    dets = predict(model, images, cfg, batch_size)
    detections = {s.index: d for s, d in zip(scenes, dets)}
    result = evaluate_detections(detections, {s.index: s.gt for s in scenes})
    return result, detections


def time_forward(model: DetectorModel, images: np.ndarray, runs: int = 30, warmup: int = 2) -> list[float]:
    """前向耗时（毫秒），每次一个样本；先跑 warmup 次不计时"""
    model.eval()
    x = Tensor(images)
    times: list[float] = []
    with no_grad():
        for i in range(warmup + runs):
            watch = Stopwatch()
            model.forward_flat(x)
            if i >= warmup:
                times.append(watch.elapsed_ms())
    return times
