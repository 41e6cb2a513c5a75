from pathlib import Path

import numpy as np
import pytest

from gtune.atlas import build_atlas, load_boxes
from gtune.config import load_config

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config("toy")


@pytest.fixture(scope="session")
def toy_atlas(toy_cfg):
    return build_atlas(load_boxes(toy_cfg["inputs"]["boxes"]))
