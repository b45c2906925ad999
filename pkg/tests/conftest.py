from __future__ import annotations

import pytest

from fourthlab import default_config
from fourthlab.config import load_config, default_config_path
from fourthlab import experiments


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def smoke_cfg():
    return load_config(default_config_path("smoke_2d.yaml"))


@pytest.fixture(scope="session")
def run_results(cfg):
    """Every runner on the packaged 1D config, computed once per session."""
    cache = {}

    def get(command):
        if command not in cache:
            cache[command] = experiments.RUNNERS[command](cfg)
        return cache[command]

    return get
