# app/services/evaluation/report.py
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from services.evaluation.ap import EvalResult


def format_summary(result: EvalResult, class_names: Sequence[str] | None = None) -> str:
    """给终端看的表格"""
    lines = [
        f"{'metric':<16}{'value':>10}",
        f"{'AP@[.50:.95]':<16}{result.ap:>10.4f}",
        f"{'AP@.50':<16}{result.ap50:>10.4f}",
        f"{'AP@.75':<16}{result.ap75:>10.4f}",
        f"{'gt / dets':<16}{f'{result.num_gt}/{result.num_detections}':>10}",
    ]
    if result.per_class_ap:
        lines.append("")
        lines.append(f"{'class':<16}{'AP':>10}{'AP50':>10}")
        for c in sorted(result.per_class_ap):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"{name:<16}{result.per_class_ap[c]:>10.4f}{result.per_class_ap50[c]:>10.4f}")
    return "\n".join(lines)


def write_metrics(path: str | Path, values: Mapping[str, float | int | str]) -> Path:
    """key = value 文本，能直接被 tomli 读回"""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in values.items():
        if isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, float):
            lines.append(f"{key} = {value:.6f}")
        else:
            lines.append(f"{key} = {value}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p
