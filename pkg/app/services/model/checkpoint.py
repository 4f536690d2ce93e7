# app/services/model/checkpoint.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from services.model.detector import (
    DetectorModel,
    ModelConfig,
    ModelScale,
    reparameterize_model,
    scale_config,
)
from services.model.weights_io import WeightFormatError, read_weights, write_weights

logger = logging.getLogger(__name__)

META_KEYS = ("meta.alpha", "meta.beta", "meta.num_classes", "meta.reg_max")


@dataclass
class Checkpoint:
    model: DetectorModel
    scale: ModelScale
    reparameterized: bool


def save_checkpoint(
    path: str | Path,
    model: DetectorModel,
    scale: ModelScale,
    state: dict[str, np.ndarray] | None = None,
) -> Path:
    """state 缺省取 model.state_dict()；EMA 权重通过 state 传入"""
    tensors: dict[str, np.ndarray] = {
        "meta.alpha": np.asarray(scale.alpha, dtype=np.float32),
        "meta.beta": np.asarray(scale.beta, dtype=np.float32),
        "meta.num_classes": np.asarray(model.cfg.num_classes, dtype=np.float32),
        "meta.reg_max": np.asarray(model.cfg.reg_max, dtype=np.float32),
    }
    tensors.update(state if state is not None else model.state_dict())
    return write_weights(path, tensors, reparameterized=model.reparameterized)


def load_checkpoint(path: str | Path, base: ModelConfig | None = None) -> Checkpoint:
    """只凭文件重建结构：meta.* 决定尺度和类别数，reparam 标志决定形态"""
    wf = read_weights(path)
    missing = [k for k in META_KEYS if k not in wf.tensors]
    if missing:
        raise WeightFormatError(f"checkpoint lacks metadata {missing}", 9)
    alpha = float(wf.tensors["meta.alpha"])
    beta = float(wf.tensors["meta.beta"])
    base = base or ModelConfig()
    cfg = ModelConfig(
        backbone_widths=base.backbone_widths,
        backbone_depths=base.backbone_depths,
        neck_widths=base.neck_widths,
        neck_depth=base.neck_depth,
        num_classes=int(round(float(wf.tensors["meta.num_classes"]))),
        reg_max=int(round(float(wf.tensors["meta.reg_max"]))),
        strides=base.strides,
        act=base.act,
    )
    scale = ModelScale(alpha, beta, "custom")
    model = DetectorModel(scale_config(cfg, scale))
    if wf.reparameterized:
        model = reparameterize_model(model)
    state = {k: v for k, v in wf.tensors.items() if not k.startswith("meta.")}
    try:
        model.load_state_dict(state, strict=True)
    except (KeyError, ValueError) as e:
        raise WeightFormatError(f"weights do not match the architecture: {e}", 9) from e
    model.eval()
    logger.info(
        f"[checkpoint] 加载完成. path={path}, alpha={alpha:g}, beta={beta:g}, "
        f"classes={cfg.num_classes}, reparam={wf.reparameterized}"
    )
    return Checkpoint(model=model, scale=scale, reparameterized=wf.reparameterized)
