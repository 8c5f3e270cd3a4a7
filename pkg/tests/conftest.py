import os
from pathlib import Path

import numpy as np
import pytest

from convnorm.data import TEST_FILE, TRAIN_FILES, Dataset, encode_records, one_hot


def make_dataset(n: int, seed: int = 0, dims=(3, 32, 32), n_classes: int = 10) -> Dataset:
    """Learnable synthetic images: a fixed per-class template and colour cast plus noise,
    quantized to /255."""
    fixed = np.random.default_rng(12345)
    templates = fixed.uniform(0, 1, size=(n_classes, *dims))
    colours = fixed.uniform(0, 1, size=(n_classes, dims[0], 1, 1))
    rng = np.random.default_rng(seed)
    classes = np.arange(n) % n_classes
    rng.shuffle(classes)
    noise = rng.normal(0, 0.1, size=(n, *dims))
    images = np.clip(0.4 * templates[classes] + 0.4 * colours[classes] + 0.1 + noise, 0, 1)
    images = (np.rint(images * 255) / 255).astype(np.float32)
    return Dataset(images, one_hot(classes, n_classes))


@pytest.fixture(scope="session")
def synthetic():
    return make_dataset


@pytest.fixture
def cifar_dir(tmp_path: Path) -> Path:
    """Directory with small CIFAR-10 style binary batch files."""
    for i, fn in enumerate(TRAIN_FILES):
        (tmp_path / fn).write_bytes(encode_records(make_dataset(20, seed=i)))
    (tmp_path / TEST_FILE).write_bytes(encode_records(make_dataset(20, seed=99)))
    return tmp_path


@pytest.fixture
def real_cifar_dir() -> Path:
    d = os.getenv("CONVNORM_DATA_DIR")
    if not d:
        pytest.skip("CONVNORM_DATA_DIR not set")
    return Path(d)
