#!/usr/bin/env python3
"""
训练形态 vs 重参数化形态的前向耗时（单线程，中位数）：

    YOLOE_THREADS=1 python scripts/bench_reparam.py --scale s --size 320 --runs 30
"""
from __future__ import annotations

import os

# BLAS 线程数要在 numpy 导入前定下来
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("YOLOE_THREADS", "1"))

import argparse  # noqa: E402
import statistics  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "app"))

from main import reference_input, reparam_deviation  # noqa: E402
from services.inference import time_forward  # noqa: E402
from services.model.detector import ModelConfig, build_model, reparameterize_model, resolve_scale, scale_config  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--scale", choices=("s", "m", "l", "x"), default="s")
    ap.add_argument("--alpha", type=float, default=None)
    ap.add_argument("--beta", type=float, default=None)
    ap.add_argument("--size", type=int, default=320)
    ap.add_argument("--runs", type=int, default=30)
    args = ap.parse_args()

    scale = resolve_scale(args.scale, args.alpha, args.beta)
    model = build_model(scale_config(ModelConfig(), scale), seed=0)
    model.eval()
    fused = reparameterize_model(model)
    sample = reference_input(size=args.size)

    train_ms = time_forward(model, sample, runs=args.runs)
    infer_ms = time_forward(fused, sample, runs=args.runs)
    t50, i50 = statistics.median(train_ms), statistics.median(infer_ms)
    print(f"scale={scale.name} size={args.size} runs={args.runs}")
    print(f"train_form p50={t50:.1f}ms min={min(train_ms):.1f}ms")
    print(f"infer_form p50={i50:.1f}ms min={min(infer_ms):.1f}ms")
    print(f"speedup={t50 / i50:.2f}x max_abs_dev={reparam_deviation(model, fused, sample):.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
