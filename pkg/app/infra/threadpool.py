# app/infra/threadpool.py
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from core.config import RunConfig


def create_threadpool(cfg: RunConfig) -> ThreadPoolExecutor:
    """
    创建线程池：训练时在后台渲染/增强下一个 batch，训练线程只做前向反向。
    threads=1 时仍然建池（1 个 worker），结果只取决于每个场景自己的 seed。
    """
    workers = max(1, cfg.runtime.threads)
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="yoloe-data")
