import numpy as np
import pytest
from hypothesis import settings

from cocgrade.raster import RasterImage

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def disk_image(side=256, cx=128.0, cy=128.0, r=40.0, fg=0.9, bg=0.1, noise=0.0, seed=0):
    ys, xs = np.mgrid[0:side, 0:side] + 0.5
    arr = np.where((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r, fg, bg).astype(float)
    if noise:
        arr = arr + np.random.default_rng(seed).normal(0, noise, arr.shape)
    return RasterImage(np.clip(arr, 0, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
