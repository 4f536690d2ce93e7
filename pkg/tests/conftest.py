import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
APP_DIR = ROOT / "app"
if str(APP_DIR) not in sys.path:
    sys.path.insert(0, str(APP_DIR))

FIXTURE_DIR = ROOT / "tests" / "fixtures"


@pytest.fixture
def tiny_run_config(tmp_path):
    """64 像素、最小宽度的训练配置，几秒内能跑完一个 epoch"""
    from core.config import RunConfig, apply_overrides

    return apply_overrides(
        RunConfig(),
        {
            "model.scale": "s",
            "model.alpha": 0.125,
            "model.beta": 0.33,
            "train.total_epochs": 1,
            "train.warmup_epochs": 0,
            "train.batch_size": 2,
            "train.input_sizes": [64],
            "train.image_size": 64,
            "train.n_scenes": 8,
            "train.n_val": 4,
            "runtime.threads": 1,
            "paths.out": str(tmp_path / "run"),
            "runtime.log_dir": str(tmp_path / "logs"),
        },
    )
