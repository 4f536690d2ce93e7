# app/services/fixtures.py
"""
黄金测试数据（golden fixtures）：

manifest 是扁平的 key = value 文件（和运行配置同一种格式）：
    represblock_small = "rep_res_block:7"
    名字 = "生成器:seed"

每个 fixture 是一个 PYEW 文件：in.* 输入、out.* 期望输出、tol 容差（rank-0）。
同一个 seed 重新生成必须逐字节一致；和提交的版本比较时，输入逐位相等、
输出在 tol 以内即算一致（不同 BLAS 的求和顺序会动最后一位）。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import tomli as tomllib

from services.evaluation.ap import average_precision
from services.losses.dfl import distribution_focal_loss
from services.losses.giou import giou_loss
from services.losses.vfl import varifocal_loss
from services.model.blocks import ConvBN, RepResBlock, reparameterize
from services.model.weights_io import WeightFormatError, decode_weights, encode_weights
from services.nn.module import Module
from services.nn.tensor import Tensor, float64_mode, no_grad
from services.postprocess.nms import nms_indices

logger = logging.getLogger(__name__)

Tensors = dict[str, np.ndarray]


class ManifestError(ValueError):
    """manifest 语法不对或引用了不存在的生成器"""


@dataclass(frozen=True)
class FixtureEntry:
    name: str
    generator: str
    seed: int

    @property
    def filename(self) -> str:
        return f"{self.name}.pyew"


def randomize_module(module: Module, rng: np.random.Generator) -> None:
    """参数和 BN 统计量都填随机值，让 BN 折叠不是恒等变换"""
    for name, p in module.named_parameters():
        if name.endswith("bn_gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        else:
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    for name, b in module.named_buffers():
        if name.endswith("bn_var"):
            b[...] = rng.uniform(0.5, 1.5, size=b.shape)
        else:
            b[...] = rng.normal(0.0, 0.2, size=b.shape)


class HashStream:
    """
    fixture 输入用的确定性数列：第 k 个数是 (seed, k) 的 32 位整数哈希。
    numpy Generator 的位流不保证跨版本不变，冻结的 fixture 不依赖它。
    """

    _MASK = np.uint64(0xFFFFFFFF)

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be >= 0, got {seed}")
        self.seed = seed
        self._next = 0

    def _hash(self, n: int) -> np.ndarray:
        k = np.arange(self._next, self._next + n, dtype=np.uint64)
        self._next += n
        h = (k * np.uint64(0x2C1B3C6D) + np.uint64(self.seed * 0x9E37 + 0x68E31DA4)) & self._MASK
        h ^= h >> np.uint64(15)
        h = (h * np.uint64(0x297A2D39)) & self._MASK
        h ^= h >> np.uint64(12)
        h = (h * np.uint64(0x165667B1)) & self._MASK
        h ^= h >> np.uint64(16)
        return h

    def uniform(self, shape: tuple[int, ...], low: float, high: float) -> np.ndarray:
        """[low, high) 内的 float32，先在 float64 里算 low + (high-low)*u 再舍入"""
        n = int(np.prod(shape))
        u = (self._hash(n) >> np.uint64(8)).astype(np.float64) * 2.0**-24
        return (low + (high - low) * u).astype(np.float32).reshape(shape)

    def integers(self, shape: tuple[int, ...], n: int) -> np.ndarray:
        """[0, n) 内的整数"""
        return (self._hash(int(np.prod(shape))) % np.uint64(n)).astype(np.int64).reshape(shape)


def fill_module(module: Module, stream: HashStream) -> None:
    """按 state_dict 顺序填值：gamma/var 在 [0.5, 1.5)，卷积核 [-0.5, 0.5)，mean [-0.2, 0.2)"""
    for name, p in module.named_parameters():
        lo, hi = (0.5, 1.5) if name.endswith("bn_gamma") else (-0.5, 0.5)
        p.data[...] = stream.uniform(p.shape, lo, hi)
    for name, b in module.named_buffers():
        lo, hi = (0.5, 1.5) if name.endswith("bn_var") else (-0.2, 0.2)
        b[...] = stream.uniform(b.shape, lo, hi)


def _tol(value: float) -> np.ndarray:
    return np.asarray(value, dtype=np.float32)


def gen_conv_bn(seed: int) -> Tensors:
    stream = HashStream(seed)
    with float64_mode(), no_grad():
        layer = ConvBN(4, 6, 3, stride=1, act="silu")
        fill_module(layer, stream)
        layer.eval()
        x = stream.uniform((2, 4, 8, 8), -2.0, 2.0)
        y = layer(Tensor(x)).data
    out: Tensors = {f"in.param.{k}": v for k, v in layer.state_dict().items()}
    out.update({"in.x": x, "out.y": y, "tol": _tol(1e-5)})
    return out


def gen_rep_res_block(seed: int) -> Tensors:
    stream = HashStream(seed)
    with float64_mode(), no_grad():
        block = RepResBlock(6, 6, act="silu", shortcut=True)
        fill_module(block, stream)
        block.eval()
        x = stream.uniform((2, 6, 8, 8), -2.0, 2.0)
        y_train = block(Tensor(x)).data
        y_infer = reparameterize(block)(Tensor(x)).data
    out: Tensors = {f"in.param.{k}": v for k, v in block.state_dict().items()}
    out.update({"in.x": x, "out.y_train": y_train, "out.y_infer": y_infer, "tol": _tol(1e-5)})
    return out


def gen_varifocal(seed: int) -> Tensors:
    stream = HashStream(seed)
    p = stream.uniform((16, 3), 0.02, 0.98)
    # label 3 是背景
    label = stream.integers((16,), 4)
    quality = stream.uniform((16,), 0.1, 1.0)
    q = np.zeros((16, 3), dtype=np.float32)
    pos = label < 3
    q[pos, label[pos]] = quality[pos]
    with float64_mode():
        loss = varifocal_loss(Tensor(p), q).item()
    return {"in.p": p, "in.q": q, "out.loss": np.asarray(loss), "tol": _tol(1e-5)}


def gen_dfl(seed: int) -> Tensors:
    stream = HashStream(seed)
    logits = stream.uniform((6, 4, 17), -3.0, 3.0)
    target = stream.uniform((6, 4), 0.0, 15.99)
    weight = stream.uniform((6,), 0.1, 1.0)
    with float64_mode():
        loss = distribution_focal_loss(Tensor(logits), target, weight).item()
    return {"in.logits": logits, "in.target": target, "in.weight": weight, "out.loss": np.asarray(loss), "tol": _tol(1e-5)}


def _random_boxes(stream: HashStream, n: int, extent: float) -> np.ndarray:
    xy = stream.uniform((n, 2), 0.0, extent * 0.8)
    wh = stream.uniform((n, 2), extent * 0.05, extent * 0.3)
    return np.concatenate([xy, xy + wh], axis=1)


def gen_giou(seed: int) -> Tensors:
    stream = HashStream(seed)
    pred = _random_boxes(stream, 8, 64.0)
    target = _random_boxes(stream, 8, 64.0)
    with float64_mode():
        loss = giou_loss(Tensor(pred), target).item()
    return {"in.pred": pred, "in.target": target, "out.loss": np.asarray(loss), "tol": _tol(1e-5)}


def gen_nms(seed: int) -> Tensors:
    stream = HashStream(seed)
    boxes = _random_boxes(stream, 60, 100.0)
    # 分数是 1/64 的整数倍，同分按下标决胜
    scores = stream.integers((60,), 65) / 64.0
    classes = stream.integers((60,), 3)
    keep = nms_indices(boxes.astype(np.float64), scores, classes, 0.5)
    return {
        "in.boxes": boxes,
        "in.scores": scores,
        "in.classes": classes,
        "in.iou_threshold": np.asarray(0.5),
        "out.keep": keep,
        "tol": _tol(0.0),
    }


def gen_ap_hand(seed: int) -> Tensors:
    """TP, FP, TP，两个 GT；seed 不参与"""
    flags = np.array([True, False, True])
    ap50 = average_precision(flags, 2)
    return {
        "in.scores": np.array([0.9, 0.8, 0.7]),
        "in.flags": flags.astype(np.float32),
        "in.num_gt": np.asarray(2.0),
        "out.ap50": np.asarray(ap50),
        "tol": _tol(1e-7),
    }


GENERATORS: dict[str, Callable[[int], Tensors]] = {
    "conv_bn": gen_conv_bn,
    "rep_res_block": gen_rep_res_block,
    "varifocal": gen_varifocal,
    "dfl": gen_dfl,
    "giou": gen_giou,
    "nms": gen_nms,
    "ap_hand": gen_ap_hand,
}


def parse_manifest(path: str | Path) -> list[FixtureEntry]:
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ManifestError(f"{p}: {e}") from None
    entries: list[FixtureEntry] = []
    for name, value in raw.items():
        if not isinstance(value, str) or ":" not in value:
            raise ManifestError(f"{p}: {name} must be \"generator:seed\", got {value!r}")
        generator, _, seed_text = value.partition(":")
        if generator not in GENERATORS:
            raise ManifestError(f"{p}: {name} uses unknown generator {generator!r}")
        try:
            seed = int(seed_text)
        except ValueError:
            raise ManifestError(f"{p}: {name} has a non-integer seed {seed_text!r}") from None
        entries.append(FixtureEntry(name=name, generator=generator, seed=seed))
    return entries


def build_fixture(entry: FixtureEntry) -> bytes:
    return encode_weights(GENERATORS[entry.generator](entry.seed))


def regenerate_fixtures(manifest: str | Path, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for entry in parse_manifest(manifest):
        path = out / entry.filename
        path.write_bytes(build_fixture(entry))
        written.append(path)
    logger.info(f"[fixtures] 重新生成完成. manifest={manifest}, files={len(written)}")
    return written


def fixture_diff(committed: Mapping[str, np.ndarray], fresh: Mapping[str, np.ndarray]) -> list[str]:
    """
    两份 fixture 不一致的键：键集合、顺序、形状、in.* 和 tol 必须逐位相等，
    out.* 允许 fixture 自己记录的 tol 以内的差。
    """
    if list(committed) != list(fresh):
        return sorted(set(committed) ^ set(fresh)) or ["<order>"]
    tol = float(np.asarray(fresh.get("tol", 0.0)))
    bad: list[str] = []
    for key, want in fresh.items():
        got = committed[key]
        if got.shape != want.shape:
            bad.append(key)
        elif key.startswith("out.") and tol > 0:
            if not np.allclose(got, want, rtol=0.0, atol=tol):
                bad.append(key)
        elif not np.array_equal(got, want):
            bad.append(key)
    return bad


def check_fixtures(manifest: str | Path, fixture_dir: str | Path) -> list[str]:
    """返回与重新生成结果不一致（或缺失）的 fixture 名字"""
    d = Path(fixture_dir)
    stale: list[str] = []
    for entry in parse_manifest(manifest):
        path = d / entry.filename
        if not path.is_file():
            logger.warning(f"[fixtures] 缺少文件: {path}")
            stale.append(entry.name)
            continue
        data = path.read_bytes()
        fresh = build_fixture(entry)
        if data == fresh:
            continue
        try:
            bad = fixture_diff(decode_weights(data).tensors, decode_weights(fresh).tensors)
        except WeightFormatError as e:
            bad = [f"<format: {e}>"]
        if bad:
            logger.warning(f"[fixtures] {entry.name} 不一致: {bad}")
            stale.append(entry.name)
    if stale:
        logger.warning(f"[fixtures] 与提交的版本不一致: {stale}")
    return stale
