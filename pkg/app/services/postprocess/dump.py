# app/services/postprocess/dump.py
"""
检测结果文本格式：每行一个检测
    image_id class_id score x1 y1 x2 y2
实数保留 4 位小数。
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Sequence

from services.postprocess.nms import Detection


class DumpFormatError(ValueError):
    def __init__(self, path: Path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


def format_detection(image_id: int, det: Detection) -> str:
    x1, y1, x2, y2 = det.box
    return f"{image_id} {det.class_id} {det.score:.4f} {x1:.4f} {y1:.4f} {x2:.4f} {y2:.4f}"


def write_detections(path: str | Path, detections: Mapping[int, Sequence[Detection]]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for image_id in sorted(detections):
        lines.extend(format_detection(image_id, d) for d in detections[image_id])
    p.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return p


def parse_detections(lines: Iterable[str], path: Path = Path("<memory>")) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise DumpFormatError(path, n, f"expected 7 fields, got {len(fields)}")
        try:
            image_id, class_id = int(fields[0]), int(fields[1])
            score, x1, y1, x2, y2 = (float(v) for v in fields[2:])
        except ValueError as e:
            raise DumpFormatError(path, n, str(e)) from None
        out.setdefault(image_id, []).append(Detection(box=(x1, y1, x2, y2), class_id=class_id, score=score))
    return out


def read_detections(path: str | Path) -> dict[int, list[Detection]]:
    p = Path(path)
    return parse_detections(p.read_text(encoding="utf-8").splitlines(), p)
