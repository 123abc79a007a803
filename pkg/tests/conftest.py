"""Shared fixtures: a small scene config and cached toy datasets.

Everything here is deterministic; the session-scoped datasets exist so the
slower training tests do not regenerate identical samples per test.
"""

import numpy as np
import pytest

from posekd.synthdata import SceneConfig, generate_scene


@pytest.fixture(scope="session")
def small_cfg() -> SceneConfig:
    return SceneConfig(height=32, width=24)


@pytest.fixture(scope="session")
def small_train(small_cfg) -> list:
    return [generate_scene(small_cfg, 7000, i) for i in range(10)]


@pytest.fixture(scope="session")
def small_val(small_cfg) -> list:
    return [generate_scene(small_cfg, 7100, i) for i in range(4)]


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
