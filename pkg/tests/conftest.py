import numpy as np
import pytest

from pointacl.geometry import PointCloud
from pointacl.pipeline import TrainConfig

_ACCEPTANCE_LINES = []


def tiny_config(**overrides) -> TrainConfig:
    base = dict(epochs_stage1=1, epochs_stage2=1, batch_size=4, depth=2, d=8, heads=2,
                n_patches=6, group_size=4, hidden=8, d_proj=8, mask_ratio=0.5, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_clouds(rng):
    return [PointCloud(rng.normal(size=(32, 3)), label=i % 2) for i in range(4)]


@pytest.fixture
def acceptance_report():
    def record(criterion: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
