import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_OVERRIDES = {
    "scene.H": 32, "scene.W": 32, "data.n_source": 12, "data.n_target": 12, "data.n_val": 4,
    "data.n_aux": 6, "train.iterations": 6, "train.target_warmup": 2, "train.eval_interval": 3,
    "extractor.iterations": 5,
}


@pytest.fixture(scope="session")
def tiny():
    """A small config and its in-memory datasets, for fast end-to-end runs."""
    from omuda.config import Config
    from omuda.trainer import make_datasets
    cfg = Config().with_overrides(TINY_OVERRIDES)
    return cfg, make_datasets(cfg)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collector for the one-line-per-criterion acceptance summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
