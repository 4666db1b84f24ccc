import os

import pytest
import yaml

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY_DIR = os.path.join(REPO_ROOT, "data", "toy")


@pytest.fixture
def toy_raw(tmp_path):
    """The shipped config.yaml with absolute input paths and every output under tmp_path."""
    with open(os.path.join(REPO_ROOT, "config.yaml"), "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    for name in ("corpus", "queries", "qrels"):
        raw["data"][name] = os.path.join(REPO_ROOT, raw["data"][name])
    raw["gateway"]["backend"] = "mock:" + os.path.join(TOY_DIR, "mock_teacher.json")
    raw["gateway"]["cache_dir"] = str(tmp_path / "cache")
    raw["gateway"]["backoff_seconds"] = 0.0
    raw["run"]["output_dir"] = str(tmp_path / "runs")
    raw["logging"]["progress"] = False
    raw["training"]["epochs"] = 5
    return raw


@pytest.fixture
def write_config(tmp_path):
    def write(raw, name="config.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(raw), encoding="utf-8")
        return str(path)
    return write
