# app/core/logging.py
from __future__ import annotations

import logging
import sys
from contextvars import ContextVar
from datetime import datetime, timedelta
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

_run_id_ctx: ContextVar[str] = ContextVar("run_id", default="-")
_epoch_ctx: ContextVar[int | None] = ContextVar("epoch", default=None)

LOG_FORMAT = "%(asctime)s %(levelname)s [%(run_id)s%(epoch_tag)s] %(name)s: %(message)s"


class RunContextFilter(logging.Filter):
    """把 run_id 和当前 epoch（训练时才有）塞进每条记录"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = _run_id_ctx.get()
        epoch = _epoch_ctx.get()
        record.epoch_tag = "" if epoch is None else f" e{epoch}"
        return True


def set_run_id(run_id: str) -> None:
    _run_id_ctx.set(run_id)


def set_epoch(epoch: int | None) -> None:
    """trainer 每个 epoch 开头设置，训练结束置回 None"""
    _epoch_ctx.set(epoch)


def log_file_for(command: str, log_dir: str | Path) -> Path:
    """每个子命令一个日志文件：train.log / eval.log / ..."""
    return Path(log_dir) / f"{command}.log"


def init_logging(level: str = "INFO", log_dir: str | Path = "logs", command: str = "yoloe") -> Path:
    """
    初始化日志：
    - 输出到 stdout（控制台）
    - 输出到文件（log_dir/<command>.log，按天轮转）
    - 格式包含 run_id，训练期间再带上 epoch
    返回日志文件路径。
    """
    root = logging.getLogger()
    root.setLevel(level.upper())

    # 避免重复 handler
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()

    formatter = logging.Formatter(fmt=LOG_FORMAT)
    run_filter = RunContextFilter()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(run_filter)
    root.addHandler(console_handler)

    log_file = log_file_for(command, log_dir)
    log_file.parent.mkdir(parents=True, exist_ok=True)

    file_handler = TimedRotatingFileHandler(
        filename=str(log_file),
        when="midnight",
        interval=1,
        backupCount=7,
        encoding="utf-8",
    )
    # 轮转后缀：train.log.YYYY-MM-DD
    file_handler.suffix = "%Y-%m-%d"
    file_handler.setFormatter(formatter)
    file_handler.addFilter(run_filter)
    root.addHandler(file_handler)

    _cleanup_old_logs(log_file, days=7)
    return log_file


def _cleanup_old_logs(log_file: Path, days: int = 7) -> None:
    """只清理本子命令的旧轮转文件"""
    try:
        cutoff = (datetime.now() - timedelta(days=days)).timestamp()
        for rotated in log_file.parent.glob(f"{log_file.name}.*"):
            if rotated.stat().st_mtime < cutoff:
                rotated.unlink()
    except OSError:
        pass  # 清理失败不影响日志功能
