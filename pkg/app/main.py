# app/main.py
"""
命令行入口：

    python app/main.py <train|eval|infer|export|inspect> [flags]

优先级：dataclass 默认值 < --config 文件 < YOLOE_THREADS < 命令行参数。
退出码见 core/status_codes.py。
"""
from __future__ import annotations

import os

# 单线程确定性模式：BLAS 线程数必须在 numpy 导入前设置
if os.environ.get("YOLOE_THREADS") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from core import status_codes
from core.config import ConfigError, RunConfig, apply_env, apply_overrides, config_lines, load_config
from core.ids import generate_run_id
from core.logging import init_logging, set_run_id
from services.evaluation.ap import evaluate_detections
from services.evaluation.report import format_summary, write_metrics
from services.inference import evaluate_model, load_images, predict
from services.model.blocks import ReparamError
from services.model.checkpoint import load_checkpoint, save_checkpoint
from services.model.detector import DetectorModel, architecture_report, build_model, count_params, reparameterize_model
from services.model.weights_io import WeightFormatError
from services.nn.tensor import Tensor, no_grad
from services.postprocess.dump import DumpFormatError, read_detections, write_detections
from services.postprocess.postprocess import PostprocessConfig
from services.train.dataset import CLASS_NAMES, VAL_SEED_OFFSET, SynthScene, generate_dataset
from services.train.trainer import TrainingDivergedError, model_config_for, train
from utils.time import Stopwatch
from utils.validate import check_input_file, check_output_dir, check_output_file

logger = logging.getLogger(__name__)

REFERENCE_SIZE = 128
REFERENCE_SEED = 20240

# 命令行参数 -> 配置键
_FLAG_KEYS: dict[str, str] = {
    "scale": "model.scale",
    "alpha": "model.alpha",
    "beta": "model.beta",
    "num_classes": "model.num_classes",
    "seed": "train.seed",
    "epochs": "train.total_epochs",
    "batch": "train.batch_size",
    "lr": "train.base_lr",
    "n_scenes": "train.n_scenes",
    "n_val": "train.n_val",
    "assigner": "train.assigner",
    "nms_iou": "postprocess.nms_threshold",
    "weights": "paths.weights",
    "out": "paths.out",
    "images": "paths.images",
    "log_dir": "runtime.log_dir",
    "log_level": "runtime.log_level",
    "input_size": "runtime.inspect_size",
}


class ExportRefused(RuntimeError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value 配置文件")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log-dir", dest="log_dir", default=None)
    p.add_argument("--log-level", dest="log_level", default=None)


def _add_scale(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", choices=("s", "m", "l", "x"), default=None)
    p.add_argument("--alpha", type=float, default=None, help="宽度系数，覆盖 --scale 的预设")
    p.add_argument("--beta", type=float, default=None, help="深度系数，覆盖 --scale 的预设")
    p.add_argument("--num-classes", dest="num_classes", type=int, default=None)


def _add_postprocess(p: argparse.ArgumentParser) -> None:
    p.add_argument("--conf", type=float, default=None, help="分数阈值")
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yoloe", description="desk-scale anchor-free detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="在合成数据上训练")
    _add_common(p)
    _add_scale(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--n-scenes", dest="n_scenes", type=int, default=None)
    p.add_argument("--assigner", choices=("tal", "fcos"), default=None)

    p = sub.add_parser("eval", help="在合成验证集上计算 AP")
    _add_common(p)
    _add_postprocess(p)
    p.add_argument("--weights", default=None)
    p.add_argument("--detections", default=None, help="直接评估已有的检测结果文件")
    p.add_argument("--n-val", dest="n_val", type=int, default=None)

    p = sub.add_parser("infer", help="对图像跑检测并写出检测结果文件")
    _add_common(p)
    _add_postprocess(p)
    p.add_argument("--weights", default=None)
    p.add_argument("--images", default=None, help=".npy，[N,3,H,W] 或 [3,H,W]")
    p.add_argument("--n-val", dest="n_val", type=int, default=None)

    p = sub.add_parser("export", help="重参数化并写出推理形态权重")
    _add_common(p)
    p.add_argument("--weights", default=None)

    p = sub.add_parser("inspect", help="逐层输出形状 / 参数量 / FLOPs")
    _add_common(p)
    _add_scale(p)
    p.add_argument("--weights", default=None, help="从权重文件重建结构（可选）")
    p.add_argument("--input-size", dest="input_size", type=int, default=None)
    return parser


def resolve_config(args: argparse.Namespace, env: dict[str, str] | None = None) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_env(cfg, env)
    values: dict[str, Any] = {key: getattr(args, flag, None) for flag, key in _FLAG_KEYS.items()}
    conf = getattr(args, "conf", None)
    if conf is not None:
        # infer 用较高的可视化阈值，eval 用低阈值保召回
        key = "postprocess.infer_conf_threshold" if args.command == "infer" else "postprocess.conf_threshold"
        values[key] = conf
    return apply_overrides(cfg, values)


def _pp_config(cfg: RunConfig, for_infer: bool) -> PostprocessConfig:
    pp = cfg.postprocess
    conf = pp.infer_conf_threshold if for_infer else pp.conf_threshold
    return PostprocessConfig(conf, pp.nms_threshold, pp.max_detections)


def _val_scenes(cfg: RunConfig) -> list[SynthScene]:
    return generate_dataset(cfg.train.seed + VAL_SEED_OFFSET, cfg.train.n_val, cfg.train.image_size)


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def run_train(cfg: RunConfig) -> int:
    check = check_output_dir(cfg.paths.out)
    if not check.ok:
        raise ConfigError(check.message)
    out = Path(cfg.paths.out)
    (out / "config.toml").write_text("\n".join(config_lines(cfg)) + "\n", encoding="utf-8")
    result = train(cfg, out)
    first, last = result.epoch_losses[0], result.epoch_losses[-1]
    print(f"steps={result.steps} epochs={len(result.epoch_losses)} first_loss={first:.4f} last_loss={last:.4f}")
    print(f"checkpoint={result.checkpoints[-1]}")
    print(f"ema_checkpoint={result.ema_checkpoints[-1]}")
    return status_codes.OK


def run_eval(cfg: RunConfig, detections_path: str | None) -> int:
    check = check_output_dir(cfg.paths.out)
    if not check.ok:
        raise ConfigError(check.message)
    out = Path(cfg.paths.out)
    scenes = _val_scenes(cfg)
    if detections_path is not None:
        pre = check_input_file(detections_path, "detections")
        if not pre.ok:
            raise ConfigError(pre.message)
        result = evaluate_detections(read_detections(detections_path), {s.index: s.gt for s in scenes})
    else:
        pre = check_input_file(cfg.paths.weights, "weights")
        if not pre.ok:
            raise ConfigError(pre.message)
        ckpt = load_checkpoint(cfg.paths.weights)
        result, detections = evaluate_model(ckpt.model, scenes, _pp_config(cfg, for_infer=False))
        write_detections(out / "detections.txt", detections)
    write_metrics(out / "metrics.txt", result.as_dict())
    print(format_summary(result, CLASS_NAMES))
    return status_codes.OK


def run_infer(cfg: RunConfig) -> int:
    pre = check_input_file(cfg.paths.weights, "weights")
    if not pre.ok:
        raise ConfigError(pre.message)
    check = check_output_dir(cfg.paths.out)
    if not check.ok:
        raise ConfigError(check.message)
    ckpt = load_checkpoint(cfg.paths.weights)
    if cfg.paths.images:
        img_check = check_input_file(cfg.paths.images, "images")
        if not img_check.ok:
            raise ConfigError(img_check.message)
        images = load_images(cfg.paths.images)
    else:
        images = np.stack([s.image for s in _val_scenes(cfg)])
    dets = predict(ckpt.model, images, _pp_config(cfg, for_infer=True))
    path = write_detections(Path(cfg.paths.out) / "detections.txt", dict(enumerate(dets)))
    print(f"images={len(dets)} detections={sum(len(d) for d in dets)} out={path}")
    return status_codes.OK


def reference_input(seed: int = REFERENCE_SEED, size: int = REFERENCE_SIZE) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(1, 3, size, size)).astype(np.float32)


def reparam_deviation(train_form: DetectorModel, infer_form: DetectorModel, sample: np.ndarray) -> float:
    """两种形态在同一输入上的原始 head 输出（cls 和 reg logits）最大绝对差"""
    train_form.eval()
    infer_form.eval()
    with no_grad():
        c0, r0, _ = train_form.forward_flat(Tensor(sample))
        c1, r1, _ = infer_form.forward_flat(Tensor(sample))
    return float(max(np.abs(c0.data - c1.data).max(), np.abs(r0.data - r1.data).max()))


def _export_target(cfg: RunConfig, explicit_out: bool) -> Path:
    src = Path(cfg.paths.weights)
    if explicit_out and cfg.paths.out.endswith(".pyew"):
        return Path(cfg.paths.out)
    base = Path(cfg.paths.out) if explicit_out else src.parent
    return base / f"{src.stem}_reparam.pyew"


def run_export(cfg: RunConfig, explicit_out: bool = True) -> int:
    pre = check_input_file(cfg.paths.weights, "weights")
    if not pre.ok:
        raise ConfigError(pre.message)
    target = _export_target(cfg, explicit_out)
    out_check = check_output_file(target, "export output")
    if not out_check.ok:
        raise ConfigError(out_check.message)

    ckpt = load_checkpoint(cfg.paths.weights)
    if ckpt.reparameterized:
        raise ExportRefused(f"{cfg.paths.weights} is already re-parameterized; export runs once on training-form weights")
    watch = Stopwatch()
    fused = reparameterize_model(ckpt.model)
    before = count_params(ckpt.model)["total"]
    after = count_params(fused)["total"]
    deviation = reparam_deviation(ckpt.model, fused, reference_input())
    save_checkpoint(target, fused, ckpt.scale)
    logger.info(
        f"[export] 完成. in={cfg.paths.weights}, out={target}, params {before} -> {after}, "
        f"max_abs_dev={deviation:.3e}, cost={watch.elapsed_ms():.0f}ms"
    )
    print(f"params_before={before}")
    print(f"params_after={after}")
    print(f"reference_max_abs_deviation={deviation:.3e}")
    print(f"out={target}")
    return status_codes.OK


def run_inspect(cfg: RunConfig) -> int:
    if cfg.paths.weights:
        pre = check_input_file(cfg.paths.weights, "weights")
        if not pre.ok:
            raise ConfigError(pre.message)
        ckpt = load_checkpoint(cfg.paths.weights)
        model, scale = ckpt.model, ckpt.scale
    else:
        mcfg, scale = model_config_for(cfg)
        model = build_model(mcfg, seed=cfg.train.seed)
    report = architecture_report(model, cfg.runtime.inspect_size, scale.name)

    print(f"{'layer':<48}{'output':>24}{'params':>12}{'MFLOPs':>12}")
    for row in report.layers:
        shape = "x".join(str(d) for d in row.out_shape)
        print(f"{row.name:<48}{shape:>24}{row.params:>12}{row.flops / 1e6:>12.2f}")
    p = report.params
    print("")
    print(f"scale={scale.name} alpha={scale.alpha:g} beta={scale.beta:g} input={report.input_size}")
    print(f"params backbone={p['backbone']} neck={p['neck']} head={p['head']}")
    print(f"total_params={p['total']} ({p['total'] / 1e6:.2f}M)")
    print(f"gflops={report.flops / 1e9:.2f}")
    return status_codes.OK


# ---------------------------------------------------------------------------
# 分发
# ---------------------------------------------------------------------------

_ERROR_CODES: list[tuple[type[BaseException], int]] = [
    (ConfigError, status_codes.INVALID_CONFIG),
    (WeightFormatError, status_codes.WEIGHT_FORMAT),
    (ExportRefused, status_codes.EXPORT_REFUSED),
    (ReparamError, status_codes.EXPORT_REFUSED),
    (TrainingDivergedError, status_codes.DIVERGED),
    (DumpFormatError, status_codes.INVALID_CONFIG),
]


def run_command(argv: Sequence[str] | None = None, env: dict[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        # argparse 已经把 usage 打到 stderr
        return status_codes.OK if e.code == 0 else status_codes.USAGE

    try:
        cfg = resolve_config(args, env)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return status_codes.INVALID_CONFIG

    init_logging(cfg.runtime.log_level, log_dir=cfg.runtime.log_dir, command=args.command)
    set_run_id(generate_run_id(args.command, cfg.train.seed))
    for line in config_lines(cfg):
        logger.info(f"[config] {line}")

    handlers: dict[str, Callable[[], int]] = {
        "train": lambda: run_train(cfg),
        "eval": lambda: run_eval(cfg, args.detections),
        "infer": lambda: run_infer(cfg),
        "export": lambda: run_export(cfg, explicit_out=args.out is not None),
        "inspect": lambda: run_inspect(cfg),
    }
    try:
        return handlers[args.command]()
    except Exception as e:
        for exc_type, code in _ERROR_CODES:
            if isinstance(e, exc_type):
                logger.error(f"[main] {args.command} 失败: {e}")
                print(f"error: {e}", file=sys.stderr)
                return code
        logger.exception(f"[main] {args.command} 运行异常")
        print(f"error: {e}", file=sys.stderr)
        return status_codes.RUNTIME_FAILURE


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
