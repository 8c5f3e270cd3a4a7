"""
CIFAR-10 (binary version) loading, subsetting and batching

https://www.cs.toronto.edu/~kriz/cifar.html
"""

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from ._util import get_logger as _get_logger
from ._util import set_debug as _set_debug

logger = _get_logger(__name__)

N_CLASSES = 10

IMAGE_SHAPE = (3, 32, 32)

RECORD_SIZE = 1 + 3 * 32 * 32
"""One label byte followed by the channel-planar, row-major pixel bytes."""

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]

TEST_FILE = "test_batch.bin"

DATA_DIR_ENV_VAR = "CONVNORM_DATA_DIR"

_ARCHIVE_SUBDIR = "cifar-10-batches-bin"


@dataclass
class Dataset:
    """Images scaled to [0, 1] with one-hot labels."""

    images: np.ndarray
    """Shape (N, 3, 32, 32), float32."""

    labels: np.ndarray
    """Shape (N, n_classes), float32, exactly one 1 per row."""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(
                f"images {self.images.shape} and labels {self.labels.shape} do not describe "
                "the same number of (N, C, H, W) examples"
            )
        binary = np.all((self.labels == 0) | (self.labels == 1))
        if not (binary and np.all(self.labels.sum(axis=1) == 1)):
            raise ValueError("every label row must contain exactly one 1 and otherwise 0")

    def __len__(self):
        return len(self.images)

    def __repr__(self):
        return f"{type(self).__name__}(n={len(self)}, image_shape={self.images.shape[1:]})"

    @property
    def classes(self) -> np.ndarray:
        """Integer class per example."""
        return np.argmax(self.labels, axis=1)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        return type(self)(self.images[idx], self.labels[idx])


def one_hot(classes: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise ValueError(f"class indices must be in 0--{n_classes - 1}")
    out = np.zeros((classes.size, n_classes), dtype=np.float32)
    out[np.arange(classes.size), classes] = 1
    return out


def parse_records(raw: bytes, *, source: str = "<bytes>") -> Dataset:
    """Parse concatenated 3073-byte CIFAR-10 records."""
    if len(raw) == 0 or len(raw) % RECORD_SIZE != 0:
        offset = len(raw) - len(raw) % RECORD_SIZE
        raise ValueError(
            f"{source}: size {len(raw)} bytes is not a positive multiple of the "
            f"{RECORD_SIZE}-byte record size (trailing partial record at offset {offset})"
        )

    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_SIZE)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= N_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{source}: label byte {labels[i]} > {N_CLASSES - 1} "
            f"in record {i} at offset {i * RECORD_SIZE}"
        )

    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255
    return Dataset(images, one_hot(labels))


def encode_records(ds: Dataset) -> bytes:
    """Serialize to the binary record format (inverse of `parse_records`)."""
    pixels = np.rint(ds.images * 255).astype(np.uint8).reshape(len(ds), -1)
    labels = ds.classes.astype(np.uint8)[:, np.newaxis]
    return np.hstack([labels, pixels]).tobytes()


def read_batch_file(fp: Path) -> Dataset:
    fp = Path(fp)
    if not fp.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch file {fp} not found")
    logger.debug(f"reading {fp}")
    return parse_records(fp.read_bytes(), source=str(fp))


def _concat(parts: List[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
    )


def resolve_data_dir(data_dir: Optional[Union[str, Path]] = None) -> Path:
    """`data_dir`, else the ``CONVNORM_DATA_DIR`` environment variable.

    The ``cifar-10-batches-bin`` directory of the extracted archive is used if present inside.
    """
    if data_dir is None:
        env = os.getenv(DATA_DIR_ENV_VAR)
        if not env:
            raise ValueError(f"no data dir given and {DATA_DIR_ENV_VAR} is not set")
        data_dir = env
    p = Path(data_dir).expanduser()
    if (p / _ARCHIVE_SUBDIR).is_dir():
        p = p / _ARCHIVE_SUBDIR
    return p


def load_cifar10(
    data_dir: Optional[Union[str, Path]] = None, *, debug: bool = False
) -> Tuple[Dataset, Dataset]:
    """
    Load the training (5 files) and test sets.

    Parameters
    ----------
    data_dir
        Directory holding ``data_batch_{1..5}.bin`` and ``test_batch.bin``.
        Defaults to the ``CONVNORM_DATA_DIR`` environment variable.
    """
    _set_debug(logger, debug)

    p = resolve_data_dir(data_dir)
    train = _concat([read_batch_file(p / fn) for fn in TRAIN_FILES])
    test = read_batch_file(p / TEST_FILE)
    logger.debug(f"loaded {len(train)} training and {len(test)} test images from {p}")

    return train, test


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified random subset of size `n`.

    Each class gets ``n // n_classes`` examples; the remainder goes one each to the lowest classes.
    """
    k = ds.n_classes
    if n < k:
        raise ValueError(f"subset size must be >= {k} to stratify over {k} classes, got {n}")
    if n > len(ds):
        raise ValueError(f"subset size {n} exceeds the dataset size {len(ds)}")
    if n % k != 0:
        warnings.warn(f"subset size {n} is not a multiple of {k}; class counts will differ by 1")

    rng = np.random.default_rng(seed)
    classes = ds.classes
    per_class, extra = divmod(n, k)
    picked = []
    for c in range(k):
        want = per_class + (1 if c < extra else 0)
        idx = np.flatnonzero(classes == c)
        if len(idx) < want:
            raise ValueError(f"class {c} has only {len(idx)} examples, {want} requested")
        picked.append(rng.permutation(idx)[:want])

    return ds.take(np.sort(np.concatenate(picked)))


@dataclass
class BatchIterator:
    """Shuffled mini-batches; the order is a pure function of (seed, epoch).

    Iterating yields one epoch of ``(images, labels)`` arrays and then advances `epoch`.
    The final partial batch is kept.
    """

    dataset: Dataset
    batch_size: int
    seed: int
    epoch: int = field(default=0)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def epoch_batches(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        perm = self.order(epoch)
        for i in range(0, len(perm), self.batch_size):
            idx = perm[i : i + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        yield from self.epoch_batches(self.epoch)
        self.epoch += 1


def batches(ds: Dataset, batch_size: int, seed: int) -> BatchIterator:
    return BatchIterator(ds, batch_size, seed)
