import math

import numpy as np
import pytest

from flowcoop.featurizer import FeatureGrid, GridConfig
from flowcoop.geometry import Box3D


def random_box(rng: np.random.Generator, spread: float = 2.0, class_id: int = 0, confidence: float = 1.0) -> Box3D:
    return Box3D(
        float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)), float(rng.uniform(-0.5, 0.5)),
        float(rng.uniform(0.5, 4.0)), float(rng.uniform(0.5, 4.0)), float(rng.uniform(0.5, 2.0)),
        float(rng.uniform(-math.pi, math.pi)), class_id, confidence,
    )


def random_grid(rng: np.random.Generator, dims=(4, 8, 8), scale: float = 1.0) -> FeatureGrid:
    C, H, W = dims
    g = GridConfig(x_range=(0.0, float(W)), y_range=(0.0, float(H)), cell=1.0, channels=C)
    return FeatureGrid((rng.standard_normal(dims) * scale).astype(np.float32), g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.pytest_terminal_summary_lines():
        terminalreporter.write_line(line)
