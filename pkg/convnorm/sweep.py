"""
Train every normalization kind over several seeds and compare their final metrics
"""

from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Tuple, Union

from ._util import get_logger as _get_logger
from .data import Dataset
from .model import ClassifierConfig, NormKind, build_allcnn
from .tensor import make_rng
from .train import TrainConfig, train_model, write_metrics_csv

logger = _get_logger(__name__)

SWEEP_SEEDS = (1, 2, 3)

RESULT_COLUMNS = ["norm", "seed", "train_loss", "train_acc", "val_loss", "val_acc"]


def run_name(norm: NormKind, seed: int) -> str:
    """Stem of the metrics CSV of one run, e.g. ``dwck-seed2``."""
    return f"{norm.value}-seed{seed}"


def run_sweep(
    data: Callable[[int], Tuple[Dataset, Dataset]],
    classifier: ClassifierConfig,
    train_cfg: TrainConfig,
    norms: Iterable[Union[str, NormKind]] = tuple(NormKind),
    seeds: Iterable[int] = SWEEP_SEEDS,
    *,
    out_dir: Optional[Union[str, Path]] = None,
    comment: Optional[Callable[[NormKind, int], str]] = None,
    debug: bool = False,
):
    """Train one model per (seed, norm kind).

    Parameters
    ----------
    data
        Maps a seed to its (train, validation) datasets. All norm kinds of a seed share them.
    classifier, train_cfg
        Base configs; `norm` and `seed` are replaced per run.
    out_dir
        If given, the metrics CSV of each run is written there as ``<run_name>.csv``.
    comment
        Maps (norm kind, seed) to the comment line of that run's CSV.

    Returns
    -------
    :class:`pandas.DataFrame`
        The final-epoch metrics of each run (columns :data:`RESULT_COLUMNS`).
    """
    import pandas as pd

    norms = [NormKind.from_name(n) for n in norms]
    seeds = list(seeds)
    if not norms or not seeds:
        raise ValueError("a sweep needs at least one norm kind and one seed")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for seed in seeds:
        train_ds, val_ds = data(seed)
        for norm in norms:
            model = build_allcnn(replace(classifier, norm=norm), make_rng(seed))
            logger.info(f"{run_name(norm, seed)}: {model}")
            rows = train_model(model, train_ds, val_ds, replace(train_cfg, seed=seed), debug=debug)

            if out_dir is not None:
                fp = out_dir / f"{run_name(norm, seed)}.csv"
                line = None if comment is None else comment(norm, seed)
                write_metrics_csv(rows, fp, comment=line)

            last = rows[-1]
            records.append(
                {
                    "norm": norm.value,
                    "seed": seed,
                    "train_loss": last.train_loss,
                    "train_acc": last.train_acc,
                    "val_loss": last.val_loss,
                    "val_acc": last.val_acc,
                }
            )

    return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)


def summarize(results):
    """Mean final metrics per norm kind, in sweep order, with the validation-accuracy
    margin over the plain model (NaN if no plain run is included)."""
    s = results.groupby("norm", sort=False)[["train_acc", "val_loss", "val_acc"]].mean()
    s["val_acc_margin"] = s.val_acc - s.val_acc.get(NormKind.NONE.value, float("nan"))
    return s.reset_index()
