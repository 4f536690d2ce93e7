# app/services/train/augment.py
"""
训练增强，顺序固定：随机裁剪 -> 缩放到本 batch 的输入尺寸 -> 水平翻转 -> 颜色扰动。
所有随机数都来自调用方传入的 rng，同一个 rng 状态得到同样的输出。
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from services.assign.iou import box_area
from services.assign.types import GroundTruth

# 裁剪后保留面积不足原面积这一比例的框会被丢掉
MIN_KEEP_FRACTION = 0.3
_MIN_BOX_PX = 1.0


@dataclass(frozen=True)
class AugmentConfig:
    crop_prob: float = 0.5
    min_crop_scale: float = 0.6
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.3


def random_crop(
    image: np.ndarray, gt: GroundTruth, rng: np.random.Generator, cfg: AugmentConfig
) -> tuple[np.ndarray, GroundTruth]:
    _, h, w = image.shape
    if rng.random() >= cfg.crop_prob:
        return image, gt
    ch = int(round(h * rng.uniform(cfg.min_crop_scale, 1.0)))
    cw = int(round(w * rng.uniform(cfg.min_crop_scale, 1.0)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    if gt.num_boxes == 0:
        return image[:, y0 : y0 + ch, x0 : x0 + cw], gt

    b = gt.boxes.copy()
    clipped = np.stack(
        [
            np.clip(b[:, 0], x0, x0 + cw),
            np.clip(b[:, 1], y0, y0 + ch),
            np.clip(b[:, 2], x0, x0 + cw),
            np.clip(b[:, 3], y0, y0 + ch),
        ],
        axis=1,
    )
    keep = (box_area(clipped) >= MIN_KEEP_FRACTION * box_area(b)) & (
        (clipped[:, 2] - clipped[:, 0]) >= _MIN_BOX_PX
    ) & ((clipped[:, 3] - clipped[:, 1]) >= _MIN_BOX_PX)
    clipped -= np.array([x0, y0, x0, y0], dtype=np.float64)
    return image[:, y0 : y0 + ch, x0 : x0 + cw], GroundTruth(clipped[keep], gt.classes[keep])


def resize(image: np.ndarray, gt: GroundTruth, size: int) -> tuple[np.ndarray, GroundTruth]:
    """双线性缩放到 size x size，框按比例缩放"""
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image, gt
    out = ndimage.zoom(image, (1.0, size / h, size / w), order=1, mode="nearest")
    # zoom 的输出尺寸按 round 计算，极少数情况下差 1 像素
    if out.shape[1:] != (size, size):
        out = out[:, :size, :size]
        pad_h, pad_w = size - out.shape[1], size - out.shape[2]
        out = np.pad(out, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    scale = np.array([size / w, size / h, size / w, size / h])
    return out.astype(np.float32, copy=False), GroundTruth(gt.boxes * scale, gt.classes)


def hflip(image: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, GroundTruth]:
    w = image.shape[-1]
    b = gt.boxes
    flipped = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1) if gt.num_boxes else b
    return image[:, :, ::-1].copy(), GroundTruth(flipped, gt.classes)


def color_jitter(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    out *= 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    mean = out.mean()
    out = (out - mean) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast)) + mean
    gray = out.mean(axis=0, keepdims=True)
    out = (out - gray) * (1.0 + rng.uniform(-cfg.saturation, cfg.saturation)) + gray
    return np.clip(out, 0.0, 1.0)


def augment(
    image: np.ndarray,
    gt: GroundTruth,
    size: int,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[np.ndarray, GroundTruth]:
    image, gt = random_crop(image, gt, rng, cfg)
    image, gt = resize(image, gt, size)
    if rng.random() < cfg.flip_prob:
        image, gt = hflip(image, gt)
    image = color_jitter(image, rng, cfg)
    return image, gt
