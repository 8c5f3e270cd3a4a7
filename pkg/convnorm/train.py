"""
SGD training, evaluation, checkpoints and metrics CSVs
"""

import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._util import atomic_write
from ._util import get_logger as _get_logger
from ._util import set_debug as _set_debug
from .data import BatchIterator, Dataset
from .model import ClassifierConfig, Model, NormKind, argmax_classes, build_allcnn, forward
from .normalization import DWCKNormState, project_nonneg
from .tensor import Tensor, cross_entropy, get_tape, make_rng, no_grad

logger = _get_logger(__name__)

CHECKPOINT_MAGIC = b"CNRMCKPT"

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    project_nonneg: bool = True
    """Clip DWCK stage weights at zero after every step."""
    record_wall_time: bool = True
    """If false, `wall_time_s` is recorded as 0 so that repeated runs give identical CSVs."""
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            raise ValueError(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_time_s: float
    weight_sum_drift: float
    """Largest |sum of effective DWCK weights - 1| over layers and channels, 0 without DWCK."""


METRICS_COLUMNS = [f.name for f in fields(MetricsRow)]


def sgd_step(
    params: Mapping[str, Tensor],
    lr: float,
    *,
    project: Sequence[DWCKNormState] = (),
) -> None:
    """``p <- p - lr * p.grad`` for every parameter, then clip the `project` states at zero.

    All gradients are checked before any parameter is changed.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient (requires_grad is off)")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    for p in params.values():
        assert p.grad is not None
        p.data -= lr * p.grad

    for s in project:
        project_nonneg(s)


def evaluate(model: Model, ds: Dataset, *, batch_size: int = 256) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode (running statistics)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")

    total_loss = 0.0
    n_correct = 0
    with no_grad():
        for i in range(0, len(ds), batch_size):
            x = ds.images[i : i + batch_size]
            y = ds.labels[i : i + batch_size]
            probs = forward(model, Tensor(x), training=False)
            total_loss += cross_entropy(probs, y).item() * len(x)
            n_correct += int(np.sum(argmax_classes(probs) == np.argmax(y, axis=1)))

    return total_loss / len(ds), n_correct / len(ds)


def train_model(
    model: Model,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    *,
    debug: bool = False,
) -> List[MetricsRow]:
    """
    Train with plain SGD, one metrics row per epoch.

    Each epoch goes over shuffled mini-batches in training mode and then evaluates
    both datasets in eval mode.
    The result is a deterministic function of the model, the data and `cfg`.
    """
    _set_debug(logger, debug)

    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation datasets must be nonempty")

    params = model.named_parameters()
    project = model.dwck_states if cfg.project_nonneg else []
    it = BatchIterator(train_ds, cfg.batch_size, cfg.seed)
    tape = get_tape()
    tape.reset()

    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        for i, (x, y) in enumerate(it):
            model.zero_grad()
            loss = cross_entropy(forward(model, Tensor(x), training=True), y)
            loss.backward()
            sgd_step(params, cfg.lr, project=project)
            logger.debug(f"epoch {epoch} batch {i + 1}/{len(it)}: loss {loss.item():.4f}")

        train_loss, train_acc = evaluate(model, train_ds, batch_size=cfg.eval_batch_size)
        val_loss, val_acc = evaluate(model, val_ds, batch_size=cfg.eval_batch_size)
        row = MetricsRow(
            epoch=epoch,
            train_loss=train_loss,
            train_acc=train_acc,
            val_loss=val_loss,
            val_acc=val_acc,
            wall_time_s=time.perf_counter() - t0 if cfg.record_wall_time else 0.0,
            weight_sum_drift=model.weight_sum_drift(),
        )
        logger.info(
            f"epoch {epoch}/{cfg.epochs}: "
            f"train loss {train_loss:.4f} acc {train_acc:.3f}, "
            f"val loss {val_loss:.4f} acc {val_acc:.3f}, "
            f"drift {row.weight_sum_drift:.3g}"
        )
        rows.append(row)

    return rows


def write_metrics_csv(
    rows: Sequence[MetricsRow], path: Union[str, Path], *, comment: Optional[str] = None
) -> None:
    """Write rows atomically, preceded by ``# comment`` if given."""
    import pandas as pd

    df = pd.DataFrame([asdict(r) for r in rows], columns=METRICS_COLUMNS)
    with atomic_write(path) as f:
        if comment is not None:
            f.write(f"# {comment}\n")
        df.to_csv(f, index=False)


def read_metrics_csv(path: Union[str, Path]):
    """Metrics CSV as a DataFrame (comment lines skipped)."""
    import pandas as pd

    return pd.read_csv(path, comment="#")


#
# Checkpoints
#

_CONFIG_FMT = "<BdIIIIBd"


def _pack_config(cfg: ClassifierConfig) -> bytes:
    flags = int(cfg.affine) | int(cfg.weighted_var) << 1
    return struct.pack(
        _CONFIG_FMT,
        cfg.norm.code,
        cfg.width_scale,
        *cfg.input_dims,
        cfg.n_classes,
        flags,
        cfg.jitter,
    )


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """
    Write config, parameters and running statistics to a flat binary file.

    Layout (little-endian): magic ``CNRMCKPT``, format version u32, config block
    (norm kind u8, width_scale f64, input dims u32 x 3, n_classes u32, flags u8, jitter f64),
    tensor count u32, then per tensor: name length u16, name, rank u8, extents u32 x rank,
    values f32.
    """
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    tensors.update(model.named_buffers())

    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_config(model.cfg)]
    parts.append(struct.pack("<I", len(tensors)))
    for name, a in tensors.items():
        bname = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(bname)}sB{a.ndim}I", len(bname), bname, a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    with atomic_write(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.source = source
        self.offset = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.buf):
            raise ValueError(f"{self.source}: truncated checkpoint at offset {self.offset}")
        vals = struct.unpack_from(fmt, self.buf, self.offset)
        self.offset += size
        return vals

    def array(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        (raw,) = self.unpack(f"{4 * count}s")
        return np.frombuffer(raw, dtype="<f4").reshape(shape)


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Rebuild the model saved by `save_checkpoint`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    r = _Reader(path.read_bytes(), str(path))

    (magic,) = r.unpack(f"{len(CHECKPOINT_MAGIC)}s")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {version} at offset {r.offset - 4} "
            f"(supported: {CHECKPOINT_VERSION})"
        )
    code, width_scale, c, h, w, n_classes, flags, jitter = r.unpack(_CONFIG_FMT)
    cfg = ClassifierConfig(
        norm=NormKind.from_code(code),
        width_scale=width_scale,
        input_dims=(c, h, w),
        n_classes=n_classes,
        jitter=jitter,
        affine=bool(flags & 1),
        weighted_var=bool(flags & 2),
    )
    model = build_allcnn(cfg, make_rng(0))
    params = model.named_parameters()
    buffers = model.named_buffers()

    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        start = r.offset
        (n,) = r.unpack("<H")
        (bname,) = r.unpack(f"{n}s")
        name = bname.decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        values = r.array(shape)

        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise ValueError(f"{path}: unexpected tensor {name!r} at offset {start}")
        if target.shape != shape:
            raise ValueError(
                f"{path}: tensor {name!r} at offset {start} has shape {shape}, "
                f"the model expects {target.shape}"
            )
        target[...] = values
        seen.add(name)

    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)}")

    return model
