# app/services/train/trainer.py
"""
训练主循环（单训练线程，数据由线程池预取一个 batch）：
    shuffle -> 每个 batch 抽输入尺寸 -> 增强 -> 前向 -> 分配 -> 总损失 -> 反向 -> SGD -> EMA
每步写一行 metrics.log，每个 epoch 写原始权重和 EMA 权重两份 checkpoint。
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from core.config import RunConfig
from core.logging import set_epoch
from core.stats import TrainStats
from infra.threadpool import create_threadpool
from services.assign.anchors import anchor_points_for_image
from services.assign.tal import TALConfig
from services.assign.types import GroundTruth
from services.losses.composite import Assigner, LossBreakdown, LossWeights, assign_batch, composite_loss, make_assigner
from services.model.checkpoint import save_checkpoint
from services.model.detector import DetectorModel, ModelConfig, ModelScale, build_model, resolve_scale, scale_config
from services.nn.tensor import Tensor
from services.train.augment import augment
from services.train.dataset import SynthScene, generate_dataset
from services.train.optim import SGD, ModelEMA, NonFiniteGradientError
from services.train.schedule import cosine_lr
from utils.time import Stopwatch

logger = logging.getLogger(__name__)

METRICS_HEADER = "# step epoch lr loss vfl giou dfl"


class TrainingDivergedError(RuntimeError):
    """loss 或梯度出现 NaN/Inf；batch_seed 加上 epoch / batch 下标即可复现该 batch"""

    def __init__(self, message: str, batch_seed: int, epoch: int, batch_index: int):
        super().__init__(f"{message} (epoch={epoch}, batch={batch_index}, batch_seed={batch_seed})")
        self.batch_seed = batch_seed
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class PreparedBatch:
    images: np.ndarray  # [B, 3, S, S]
    gts: list[GroundTruth]
    size: int
    batch_seed: int
    epoch: int
    index: int


@dataclass
class TrainResult:
    model: DetectorModel
    ema_state: dict[str, np.ndarray]
    scale: ModelScale
    checkpoints: list[Path] = field(default_factory=list)
    ema_checkpoints: list[Path] = field(default_factory=list)
    metrics_log: Path | None = None
    steps: int = 0
    epoch_losses: list[float] = field(default_factory=list)


def batch_seed_for(seed: int, epoch: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch_index]).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def prepare_batch(
    scenes: Sequence[SynthScene],
    indices: Sequence[int],
    input_sizes: Sequence[int],
    batch_seed: int,
    epoch: int,
    index: int,
) -> PreparedBatch:
    """输入尺寸和每张图的增强随机数都只由 batch_seed 决定"""
    rng = np.random.default_rng(batch_seed)
    size = int(input_sizes[int(rng.integers(0, len(input_sizes)))])
    images: list[np.ndarray] = []
    gts: list[GroundTruth] = []
    for j, scene_idx in enumerate(indices):
        scene = scenes[scene_idx]
        img, gt = augment(scene.image, scene.gt, size, np.random.default_rng([batch_seed, j]))
        images.append(img)
        gts.append(gt)
    return PreparedBatch(np.stack(images).astype(np.float32), gts, size, batch_seed, epoch, index)


def model_config_for(cfg: RunConfig) -> tuple[ModelConfig, ModelScale]:
    scale = resolve_scale(cfg.model.scale, cfg.model.alpha, cfg.model.beta)
    base = ModelConfig(num_classes=cfg.model.num_classes, reg_max=cfg.model.reg_max)
    return scale_config(base, scale), scale


def train(
    cfg: RunConfig,
    out_dir: str | Path,
    scenes: Sequence[SynthScene] | None = None,
    executor: Executor | None = None,
    stats: TrainStats | None = None,
) -> TrainResult:
    t = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = stats or TrainStats()
    own_pool = executor is None
    pool = create_threadpool(cfg) if own_pool else executor

    try:
        if scenes is None:
            scenes = generate_dataset(t.seed, t.n_scenes, t.image_size, pool)
        n = len(scenes)
        if n == 0:
            raise ValueError("training needs at least one scene")

        mcfg, scale = model_config_for(cfg)
        model = build_model(mcfg, seed=t.seed)
        model.train()
        optimizer = SGD(model, momentum=t.momentum, weight_decay=t.weight_decay)
        ema = ModelEMA(model, decay=t.ema_decay)
        assigner = make_assigner(t.assigner, TALConfig(cfg.tal.topk, cfg.tal.alpha_tal, cfg.tal.beta_tal))
        weights = LossWeights(cfg.loss.w_vfl, cfg.loss.w_giou, cfg.loss.w_dfl, cfg.loss.alpha_vfl, cfg.loss.gamma_vfl)

        steps_per_epoch = math.ceil(n / t.batch_size)
        total_steps = t.total_epochs * steps_per_epoch
        warmup_steps = t.warmup_epochs * steps_per_epoch
        base_lr = t.effective_lr
        logger.info(
            f"[trainer] 开始训练. scale={scale.name}(alpha={scale.alpha:g}, beta={scale.beta:g}), scenes={n}, "
            f"epochs={t.total_epochs}, steps={total_steps}, base_lr={base_lr:g}, assigner={t.assigner}"
        )

        result = TrainResult(model=model, ema_state=ema.state_dict(), scale=scale, metrics_log=out / "metrics.log")
        step = 0
        with open(result.metrics_log, "w", encoding="utf-8") as mlog:
            mlog.write(METRICS_HEADER + "\n")
            for epoch in range(1, t.total_epochs + 1):
                set_epoch(epoch)
                watch = Stopwatch()
                order = epoch_order(t.seed, epoch, n)
                chunks = [order[i : i + t.batch_size] for i in range(0, n, t.batch_size)]

                def submit(b: int) -> Future[PreparedBatch]:
                    return pool.submit(
                        prepare_batch, scenes, chunks[b], t.input_sizes, batch_seed_for(t.seed, epoch, b), epoch, b
                    )

                pending = submit(0)
                unmatched_epoch = 0
                for b in range(len(chunks)):
                    batch = pending.result()
                    stats.add_prepared(len(batch.gts))
                    if b + 1 < len(chunks):
                        pending = submit(b + 1)
                    step += 1
                    lr = cosine_lr(step, total_steps, warmup_steps, base_lr)
                    loss, unmatched = _train_step(model, optimizer, assigner, weights, batch, lr)
                    ema.update(model)
                    unmatched_epoch += unmatched
                    stats.add_step(loss.total.item(), unmatched)
                    mlog.write(
                        f"{step} {epoch} {lr:.10g} {loss.total.item():.6f} {loss.vfl:.6f} {loss.giou:.6f} {loss.dfl:.6f}\n"
                    )
                    logger.debug(
                        f"[trainer] step={step} epoch={epoch} size={batch.size} lr={lr:.6g} "
                        f"loss={loss.total.item():.4f} pos={loss.num_positives}"
                    )
                mlog.flush()

                mean_loss = stats.close_epoch()
                result.epoch_losses.append(mean_loss)
                raw_path = save_checkpoint(out / f"epoch_{epoch:03d}.pyew", model, scale)
                ema_path = save_checkpoint(out / f"epoch_{epoch:03d}_ema.pyew", model, scale, state=ema.state_dict())
                result.checkpoints.append(raw_path)
                result.ema_checkpoints.append(ema_path)
                logger.info(
                    f"[trainer] epoch {epoch} done. mean_loss={mean_loss:.4f}, unmatched_gts={unmatched_epoch}, "
                    f"lr={lr:.6g}, cost={watch.elapsed_ms() / 1000.0:.1f}s"
                )

        result.steps = step
        result.ema_state = ema.state_dict()
        logger.info(f"[trainer] 训练结束. steps={step}, stats={stats.get_snapshot()}")
        return result
    finally:
        set_epoch(None)
        if own_pool:
            pool.shutdown(wait=True)


def _train_step(
    model: DetectorModel,
    optimizer: SGD,
    assigner: Assigner,
    weights: LossWeights,
    batch: PreparedBatch,
    lr: float,
) -> tuple[LossBreakdown, int]:
    images = Tensor(batch.images)
    cls, reg, _ = model.forward_flat(images)
    points = anchor_points_for_image(batch.size, batch.size, model.cfg.strides)
    assignments = assign_batch(cls, reg, points, batch.gts, assigner)
    unmatched = sum(len(a.unmatched_gts) for a in assignments)
    loss = composite_loss(cls, reg, assignments, points, weights)
    value = loss.total.item()
    if not math.isfinite(value):
        logger.error(f"[trainer] loss 非有限值. epoch={batch.epoch}, batch={batch.index}, batch_seed={batch.batch_seed}")
        raise TrainingDivergedError(f"non-finite loss {value}", batch.batch_seed, batch.epoch, batch.index)
    optimizer.zero_grad()
    loss.total.backward()
    try:
        optimizer.step(lr)
    except NonFiniteGradientError as e:
        logger.error(f"[trainer] {e}. epoch={batch.epoch}, batch={batch.index}, batch_seed={batch.batch_seed}")
        raise TrainingDivergedError(str(e), batch.batch_seed, batch.epoch, batch.index) from e
    return loss, unmatched
