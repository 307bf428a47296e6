from functools import lru_cache

import numpy as np
import pytest

from rewarp.core import Image, make_uniform_grid
from rewarp.synth import Texture, generate_pair, make_scene


def texture_image(width=128, height=128, seed=7, offset=(0.0, 0.0)) -> Image:
    pts = make_uniform_grid(width, height).coords + np.asarray(offset)
    return Image(Texture(seed)(pts))


@lru_cache(maxsize=None)
def cached_pair(seed, width=256, height=256, bucket=None, tps=None, layers=0):
    spec = make_scene(seed, width, height, bucket=bucket, tps_amplitude=tps, n_layers=layers)
    ref, tgt, gt = generate_pair(spec)
    return spec, ref, tgt, gt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tex128():
    return texture_image()


ACCEPTANCE_LINES = []


def report_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
