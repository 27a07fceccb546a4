from pathlib import Path

import numpy as np
import pytest

from taillight.config import load_config
from taillight.dataset import generate_dataset, read_dataset, scene_from_config
from taillight.states import CLASS_CODES

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(CONFIGS / "tiny.cfg")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, tiny_cfg):
    """Two train and one test sequence per class at the tiny resolution."""
    root = tmp_path_factory.mktemp("small_ds")
    counts = {"train": dict.fromkeys(CLASS_CODES, 2), "test": dict.fromkeys(CLASS_CODES, 1)}
    generate_dataset(root, counts, scene_from_config(tiny_cfg.data), seed=5, length=24)
    return read_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
