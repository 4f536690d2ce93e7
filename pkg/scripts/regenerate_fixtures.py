#!/usr/bin/env python3
"""
重新生成 tests/fixtures/ 下的黄金数据：

    python scripts/regenerate_fixtures.py            # 写文件
    python scripts/regenerate_fixtures.py --check    # 只比较，不一致时退出码 1
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "app"))

from core.logging import init_logging  # noqa: E402
from services.fixtures import check_fixtures, regenerate_fixtures  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--manifest", default=str(ROOT / "tests" / "fixtures" / "manifest.toml"))
    ap.add_argument("--out", default=str(ROOT / "tests" / "fixtures"))
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    init_logging("INFO", log_dir=ROOT / "logs", command="fixtures")

    if args.check:
        stale = check_fixtures(args.manifest, args.out)
        for name in stale:
            print(f"stale: {name}")
        return 1 if stale else 0
    for path in regenerate_fixtures(args.manifest, args.out):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
