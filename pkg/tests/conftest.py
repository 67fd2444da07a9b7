import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import model  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains many networks; set MUONBENCH_SLOW=1 to run")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MUONBENCH_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set MUONBENCH_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A run that trains in well under a second"""
    return model.with_steps(
        model.default_run_config(spec=model.MlpSpec(hidden_width=16, depth=2), batch_size=8, eval_every=5),
        40,
    )


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("MUONBENCH_WORKSPACE", raising=False)
    return tmp_path / "ws"
