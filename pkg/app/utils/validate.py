# app/utils/validate.py
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from core import status_codes


@dataclass(frozen=True)
class PathCheck:
    ok: bool
    code: int
    message: str = ""


def check_input_file(path: str | Path | None, what: str) -> PathCheck:
    """
    输入文件预检（开工前做）：
    - 未给出 / 不存在 / 空文件：INVALID_CONFIG
    """
    if path is None or str(path) == "":
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"{what} not found: {p}")
    if p.stat().st_size <= 0:
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"{what} is empty: {p}")
    return PathCheck(ok=True, code=status_codes.OK)


def check_output_dir(path: str | Path) -> PathCheck:
    """输出目录：能创建、且不是已存在的普通文件"""
    p = Path(path)
    if p.exists() and not p.is_dir():
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"output path is a file: {p}")
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"cannot create {p}: {e}")
    return PathCheck(ok=True, code=status_codes.OK)


def check_output_file(path: str | Path | None, what: str) -> PathCheck:
    if path is None or str(path) == "":
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"{what} path is required")
    p = Path(path)
    if p.exists() and p.is_dir():
        return PathCheck(ok=False, code=status_codes.INVALID_CONFIG, message=f"{what} is a directory: {p}")
    return check_output_dir(p.parent if str(p.parent) else Path("."))
