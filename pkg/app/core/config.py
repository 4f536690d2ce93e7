# app/core/config.py
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping

# Python 3.11+ 用 tomllib；3.10 可用 tomli 替代
import tomli as tomllib


class ConfigError(ValueError):
    """配置文件或命令行参数不合法"""


@dataclass(frozen=True)
class ModelScaleConfig:
    # s | m | l | x；alpha/beta 给出时覆盖预设，名字变为 custom
    scale: str = "l"
    alpha: float | None = None
    beta: float | None = None
    num_classes: int = 3
    reg_max: int = 16


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 60
    warmup_epochs: int = 3
    # 线性缩放：0.01 * batch / 64；<= 0 表示按 batch_size 自动计算
    base_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # 60 epoch 的小规模训练用 0.998；0.9998 的半衰期比整次训练还长
    ema_decay: float = 0.998
    batch_size: int = 8
    input_sizes: tuple[int, ...] = (256, 320, 384)
    seed: int = 0
    n_scenes: int = 600
    n_val: int = 100
    image_size: int = 320
    assigner: str = "tal"

    @property
    def effective_lr(self) -> float:
        return self.base_lr if self.base_lr > 0 else 0.01 * self.batch_size / 64.0


@dataclass(frozen=True)
class LossConfig:
    w_vfl: float = 1.0
    w_giou: float = 2.5
    w_dfl: float = 0.5
    alpha_vfl: float = 0.75
    gamma_vfl: float = 2.0


@dataclass(frozen=True)
class TALSettings:
    topk: int = 13
    alpha_tal: float = 1.0
    beta_tal: float = 6.0


@dataclass(frozen=True)
class PostprocessSettings:
    conf_threshold: float = 0.01
    infer_conf_threshold: float = 0.25
    nms_threshold: float = 0.6
    max_detections: int = 300


@dataclass(frozen=True)
class PathsConfig:
    weights: str = ""
    out: str = "runs"
    images: str = ""


@dataclass(frozen=True)
class RuntimeConfig:
    # 工作线程数（数据准备）；1 = 确定性单线程模式
    threads: int = 4
    log_level: str = "INFO"
    log_dir: str = "logs"
    # inspect 的统计输入尺寸
    inspect_size: int = 640


@dataclass(frozen=True)
class RunConfig:
    model: ModelScaleConfig = ModelScaleConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    tal: TALSettings = TALSettings()
    postprocess: PostprocessSettings = PostprocessSettings()
    paths: PathsConfig = PathsConfig()
    runtime: RuntimeConfig = RuntimeConfig()


_SECTIONS: tuple[str, ...] = tuple(f.name for f in fields(RunConfig))


def _flatten(d: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def _coerce(section: Any, name: str, value: Any) -> Any:
    """按 dataclass 默认值的类型强转，toml 里写成字符串也能用"""
    default = getattr(section, name)
    key = f"{type(section).__name__}.{name}"
    try:
        if name in ("alpha", "beta"):
            return None if value in (None, "", "none") else float(value)
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key} must be an integer, got {value}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else str(value).replace(",", " ").split()
            return tuple(int(v) for v in items)
        return str(value)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot use value {value!r} ({e})") from None


def apply_overrides(cfg: RunConfig, values: Mapping[str, Any]) -> RunConfig:
    """
    values 的键是 section.field，比如 train.total_epochs；未知键直接报错。
    值为 None 的键跳过（命令行没给的参数）。
    """
    updates: Dict[str, Dict[str, Any]] = {}
    for dotted, value in values.items():
        if value is None:
            continue
        section_name, _, field_name = dotted.partition(".")
        if section_name not in _SECTIONS or not field_name:
            raise ConfigError(f"unknown config key: {dotted}")
        section = getattr(cfg, section_name)
        if field_name not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key: {dotted}")
        updates.setdefault(section_name, {})[field_name] = _coerce(section, field_name, value)
    new_sections = {name: replace(getattr(cfg, name), **vals) for name, vals in updates.items()}
    out = replace(cfg, **new_sections)
    validate_config(out)
    return out


def load_config(path: str | Path | None = None, base: RunConfig | None = None) -> RunConfig:
    """
    读取扁平的 key = value 配置文件（tomli 解析；section.field = value 形式，# 注释）。
    - 缺失字段使用 dataclass 默认值
    - 类型尽量做强转
    - 未知键报错
    """
    cfg = base or RunConfig()
    if path is None:
        validate_config(cfg)
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return apply_overrides(cfg, _flatten(raw))


def apply_env(cfg: RunConfig, env: Mapping[str, str] | None = None) -> RunConfig:
    """YOLOE_THREADS 限制工作线程数"""
    env = os.environ if env is None else env
    raw = env.get("YOLOE_THREADS")
    if not raw:
        return cfg
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"YOLOE_THREADS must be an integer, got {raw!r}") from None
    return apply_overrides(cfg, {"runtime.threads": threads})


def validate_config(cfg: RunConfig) -> None:
    # 基础校验：避免明显错误配置
    m, t, pp, rt = cfg.model, cfg.train, cfg.postprocess, cfg.runtime
    if m.scale not in ("s", "m", "l", "x"):
        raise ConfigError(f"model.scale must be one of s/m/l/x, got {m.scale}")
    if m.alpha is not None and m.alpha <= 0:
        raise ConfigError("model.alpha must be > 0")
    if m.beta is not None and m.beta <= 0:
        raise ConfigError("model.beta must be > 0")
    if m.num_classes < 1:
        raise ConfigError("model.num_classes must be >= 1")
    if m.reg_max < 1:
        raise ConfigError("model.reg_max must be >= 1")
    if t.total_epochs < 1:
        raise ConfigError("train.total_epochs must be >= 1")
    if not (0 <= t.warmup_epochs < t.total_epochs):
        raise ConfigError("train.warmup_epochs must be in [0, total_epochs)")
    if t.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if not t.input_sizes or any(s <= 0 or s % 32 for s in t.input_sizes):
        raise ConfigError(f"train.input_sizes must be positive multiples of 32, got {t.input_sizes}")
    if t.image_size <= 0 or t.image_size % 32:
        raise ConfigError("train.image_size must be a positive multiple of 32")
    if not (0.0 < t.ema_decay < 1.0):
        raise ConfigError("train.ema_decay must be in (0, 1)")
    if t.momentum < 0 or t.weight_decay < 0:
        raise ConfigError("train.momentum and train.weight_decay must be >= 0")
    if t.n_scenes < 1 or t.n_val < 1:
        raise ConfigError("train.n_scenes and train.n_val must be >= 1")
    if t.assigner not in ("tal", "fcos"):
        raise ConfigError(f"train.assigner must be tal or fcos, got {t.assigner}")
    if min(cfg.loss.w_vfl, cfg.loss.w_giou, cfg.loss.w_dfl) < 0:
        raise ConfigError("loss weights must be >= 0")
    if cfg.tal.topk < 1 or cfg.tal.alpha_tal <= 0 or cfg.tal.beta_tal <= 0:
        raise ConfigError("tal.topk must be >= 1 and exponents > 0")
    for name in ("conf_threshold", "infer_conf_threshold"):
        if not (0.0 <= getattr(pp, name) < 1.0):
            raise ConfigError(f"postprocess.{name} must be in [0, 1)")
    if not (0.0 < pp.nms_threshold <= 1.0):
        raise ConfigError("postprocess.nms_threshold must be in (0, 1]")
    if pp.max_detections < 1:
        raise ConfigError("postprocess.max_detections must be >= 1")
    if rt.threads < 1:
        raise ConfigError("runtime.threads must be >= 1")
    valid_log_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
    if rt.log_level.upper() not in valid_log_levels:
        raise ConfigError(f"runtime.log_level must be one of {valid_log_levels}, got {rt.log_level}")
    if rt.inspect_size <= 0 or rt.inspect_size % 32:
        raise ConfigError("runtime.inspect_size must be a positive multiple of 32")


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, tuple):
        return "[" + ", ".join(str(x) for x in v) + "]"
    if v is None:
        return '"none"'
    return repr(v) if isinstance(v, float) else str(v)


def config_lines(cfg: RunConfig) -> list[str]:
    """生效配置的 key = value 文本，能原样作为配置文件读回"""
    lines: list[str] = []
    for section_name in _SECTIONS:
        section = getattr(cfg, section_name)
        for f in fields(section):
            lines.append(f"{section_name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return lines
