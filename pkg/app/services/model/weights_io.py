# app/services/model/weights_io.py
"""
PYEW 权重文件：

    magic  "PYEW"            4 bytes
    version u32 LE           = 1
    reparam u8               0 = 训练形态, 1 = 重参数化后的推理形态
    records ...              直到文件结束
        name_len u32 | name utf-8 | rank u32 | dims u32 * rank | payload f32 LE
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"PYEW"
VERSION = 1
_U32 = struct.Struct("<I")


class WeightFormatError(RuntimeError):
    """文件损坏或格式不符，offset 是出错位置的字节偏移"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class WeightFile:
    reparameterized: bool
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_weights(tensors: Mapping[str, np.ndarray], reparameterized: bool = False) -> bytes:
    parts: list[bytes] = [MAGIC, _U32.pack(VERSION), bytes([1 if reparameterized else 0])]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(a.ndim))
        parts.extend(_U32.pack(int(d)) for d in a.shape)
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> WeightFile:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise WeightFormatError("bad magic, not a PYEW file", 0)
    if len(buf) < 9:
        raise WeightFormatError("truncated header", len(buf))
    (version,) = _U32.unpack_from(buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}", 4)
    flag = buf[8]
    if flag not in (0, 1):
        raise WeightFormatError(f"bad reparam flag {flag}", 8)

    out = WeightFile(reparameterized=bool(flag))
    pos = 9
    end = len(buf)

    def read_u32(at: int, what: str) -> int:
        if at + 4 > end:
            raise WeightFormatError(f"truncated {what}", at)
        return _U32.unpack_from(buf, at)[0]

    while pos < end:
        start = pos
        name_len = read_u32(pos, "name length")
        pos += 4
        if pos + name_len > end:
            raise WeightFormatError("truncated tensor name", pos)
        try:
            name = buf[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError("tensor name is not utf-8", pos) from None
        pos += name_len
        rank = read_u32(pos, "rank")
        if rank > 8:
            raise WeightFormatError(f"implausible rank {rank} for {name!r}", pos)
        pos += 4
        dims: list[int] = []
        for _ in range(rank):
            dims.append(read_u32(pos, "dimension"))
            pos += 4
        count = int(np.prod(dims)) if dims else 1
        nbytes = 4 * count
        if pos + nbytes > end:
            raise WeightFormatError(f"truncated payload for {name!r}", pos)
        if name in out.tensors:
            raise WeightFormatError(f"duplicate tensor {name!r}", start)
        out.tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
        pos += nbytes
    return out


def write_weights(path: str | Path, tensors: Mapping[str, np.ndarray], reparameterized: bool = False) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    data = encode_weights(tensors, reparameterized)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(p)
    logger.debug(f"[weights_io] 写入完成. path={p}, tensors={len(tensors)}, bytes={len(data)}")
    return p


def read_weights(path: str | Path) -> WeightFile:
    p = Path(path)
    wf = decode_weights(p.read_bytes())
    logger.debug(f"[weights_io] 读取完成. path={p}, tensors={len(wf.tensors)}, reparam={wf.reparameterized}")
    return wf
