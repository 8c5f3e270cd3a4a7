"""
Command-line interface: ``convnorm {train,sweep,eval,gradcheck,planner,sampling-demo}``
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from ._util import atomic_write
from ._util import get_logger as _get_logger
from .model import ClassifierConfig, NormKind
from .normalization import DEFAULT_JITTER
from .sweep import SWEEP_SEEDS
from .train import TrainConfig

logger = _get_logger(__name__)

COMMANDS = ("train", "sweep", "eval", "gradcheck", "planner", "sampling-demo")

_OUTPUT_FIELDS = {"out", "checkpoint"}


@dataclass
class RunConfig:
    command: str
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: Optional[Path] = None
    """Falls back to the ``CONVNORM_DATA_DIR`` environment variable."""
    out: Optional[Path] = None
    checkpoint: Optional[Path] = None
    train_subset: Optional[int] = None
    val_subset: Optional[int] = None
    dims: Tuple[int, int] = (32, 32)
    seeds: int = 10
    norms: Tuple[NormKind, ...] = tuple(NormKind)
    sweep_seeds: Tuple[int, ...] = SWEEP_SEEDS
    replicates: int = 100
    spec: str = "all"
    n_samples: int = 10_000
    debug: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(
                f"invalid command {self.command!r}. Valid options are: {', '.join(COMMANDS)}."
            )
        for name in ("train_subset", "val_subset"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.seeds < 1 or self.replicates < 1 or self.n_samples < 1:
            raise ValueError("seeds, replicates and sample count must be >= 1")
        if not self.norms or not self.sweep_seeds:
            raise ValueError("a sweep needs at least one norm kind and one seed")

    def comment(self) -> str:
        """The resolved config on one line, output paths excluded."""
        items = []
        for k, v in asdict(self).items():
            if k in _OUTPUT_FIELDS:
                continue
            if k == "dims":
                items.append(f"dims={v[0]}x{v[1]}")
            elif isinstance(v, dict):
                items.extend(f"{k}.{kk}={_fmt(vv)}" for kk, vv in v.items())
            else:
                items.append(f"{k}={_fmt(v)}")
        return "config " + " ".join(items)


def _fmt(v) -> str:
    if isinstance(v, NormKind):
        return v.value
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _dims(s: str) -> Tuple[int, int]:
    try:
        h, w = (int(p) for p in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 32x32, got {s!r}") from None
    return h, w


def _build_parser() -> argparse.ArgumentParser:
    from .sampling import BUILTIN_SPECS

    parser = argparse.ArgumentParser(
        prog="convnorm",
        description="Normalization-layer experiments on an ALL-CNN-C classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--debug", action="store_true", help="show debug log messages")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data-dir", type=Path, help="CIFAR-10 binary batches directory")
    data.add_argument("--val-subset", type=int, help="stratified test-split subset size")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--lr", type=float, default=0.01)
    training.add_argument("--batch-size", type=int, default=32)
    training.add_argument("--epochs", type=int, default=10)
    training.add_argument("--train-subset", type=int, help="stratified training subset size")
    training.add_argument("--width-scale", type=float, default=1.0)
    training.add_argument("--jitter", type=float, default=DEFAULT_JITTER)
    training.add_argument("--no-affine", action="store_true")
    training.add_argument("--weighted-var", action="store_true")
    training.add_argument(
        "--no-project", action="store_true", help="skip DWCK nonnegativity clipping"
    )
    training.add_argument("--no-wall-time", action="store_true", help="record wall time as 0")

    norm_names = [k.value for k in NormKind]

    p = sub.add_parser("train", parents=[common, data, training], help="train a classifier")
    p.add_argument("--norm", choices=norm_names, default="none")
    p.add_argument("--out", type=Path, default=Path("metrics.csv"), help="metrics CSV")
    p.add_argument("--checkpoint", type=Path, help="save the trained model here")

    p = sub.add_parser(
        "sweep",
        parents=[data, training],
        help="train every norm kind over several seeds and compare",
        description="Desk-scale defaults: width scale 0.25, 5000 training and 1000 "
        "validation images. Each seed draws its own stratified subsets.",
    )
    p.add_argument("--norms", nargs="+", choices=norm_names, default=norm_names)
    p.add_argument("--seeds", nargs="+", type=int, default=list(SWEEP_SEEDS))
    p.add_argument("--out", type=Path, default=Path("sweep"), help="output directory")
    p.add_argument("--debug", action="store_true", help="show debug log messages")
    p.set_defaults(width_scale=0.25, train_subset=5000, val_subset=1000)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--batch-size", type=int, default=256)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per case")

    p = sub.add_parser("planner", parents=[common], help="print the DWCK plan for given dims")
    p.add_argument("--dims", type=_dims, default=(32, 32), help="HxW")

    p = sub.add_parser(
        "sampling-demo", parents=[common], help="Monte Carlo vs importance sampling report"
    )
    p.add_argument("--spec", choices=[*BUILTIN_SPECS, "all"], default="all")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--n", type=int, default=10_000, help="samples per estimate")
    p.add_argument("--out", type=Path, help="CSV path (default: print)")

    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Parse and validate; invalid input exits with a usage message (code 2)."""
    parser = _build_parser()
    a = parser.parse_args(argv)

    try:
        if a.command in ("train", "sweep"):
            classifier = ClassifierConfig(
                norm=NormKind.from_name(getattr(a, "norm", "none")),
                width_scale=a.width_scale,
                jitter=a.jitter,
                affine=not a.no_affine,
                weighted_var=a.weighted_var,
            )
            train = TrainConfig(
                lr=a.lr,
                epochs=a.epochs,
                batch_size=a.batch_size,
                seed=getattr(a, "seed", 0),
                project_nonneg=not a.no_project,
                record_wall_time=not a.no_wall_time,
            )
        else:
            classifier = ClassifierConfig()
            kw = {"eval_batch_size": a.batch_size} if a.command == "eval" else {}
            train = TrainConfig(seed=a.seed, **kw)

        return RunConfig(
            command=a.command,
            classifier=classifier,
            train=train,
            data_dir=getattr(a, "data_dir", None),
            out=getattr(a, "out", None),
            checkpoint=getattr(a, "checkpoint", None),
            train_subset=getattr(a, "train_subset", None),
            val_subset=getattr(a, "val_subset", None),
            dims=getattr(a, "dims", (32, 32)),
            seeds=a.seeds if a.command == "gradcheck" else 10,
            norms=tuple(NormKind.from_name(n) for n in getattr(a, "norms", list(NormKind))),
            sweep_seeds=tuple(a.seeds) if a.command == "sweep" else SWEEP_SEEDS,
            replicates=getattr(a, "replicates", 100),
            spec=getattr(a, "spec", "all"),
            n_samples=getattr(a, "n", 10_000),
            debug=a.debug,
        )
    except ValueError as e:
        parser.error(str(e))
        raise AssertionError("shouldn't reach here")


def _load_data(cfg: RunConfig):
    from .data import load_cifar10, subset

    train_ds, test_ds = load_cifar10(cfg.data_dir, debug=cfg.debug)
    if cfg.train_subset is not None:
        train_ds = subset(train_ds, cfg.train_subset, cfg.train.seed)
    if cfg.val_subset is not None:
        test_ds = subset(test_ds, cfg.val_subset, cfg.train.seed)
    return train_ds, test_ds


def _run_train(cfg: RunConfig) -> int:
    from .model import build_allcnn
    from .tensor import make_rng
    from .train import save_checkpoint, train_model, write_metrics_csv

    train_ds, val_ds = _load_data(cfg)
    model = build_allcnn(cfg.classifier, make_rng(cfg.train.seed))
    logger.info(f"{model}, {len(train_ds)} training and {len(val_ds)} validation images")

    rows = train_model(model, train_ds, val_ds, cfg.train, debug=cfg.debug)

    assert cfg.out is not None
    write_metrics_csv(rows, cfg.out, comment=cfg.comment())
    logger.info(f"wrote {len(rows)} metrics rows to {cfg.out}")
    if cfg.checkpoint is not None:
        save_checkpoint(model, cfg.checkpoint)
        logger.info(f"saved checkpoint to {cfg.checkpoint}")

    return 0


def _run_sweep(cfg: RunConfig) -> int:
    from dataclasses import replace

    from .data import load_cifar10, subset
    from .sweep import run_sweep, summarize

    full_train, full_test = load_cifar10(cfg.data_dir, debug=cfg.debug)

    def data(seed: int):
        train_ds, test_ds = full_train, full_test
        if cfg.train_subset is not None:
            train_ds = subset(train_ds, cfg.train_subset, seed)
        if cfg.val_subset is not None:
            test_ds = subset(test_ds, cfg.val_subset, seed)
        return train_ds, test_ds

    def comment(norm: NormKind, seed: int) -> str:
        # Same line `convnorm train` writes for this run
        run_cfg = RunConfig(
            command="train",
            classifier=replace(cfg.classifier, norm=norm),
            train=replace(cfg.train, seed=seed),
            data_dir=cfg.data_dir,
            train_subset=cfg.train_subset,
            val_subset=cfg.val_subset,
            debug=cfg.debug,
        )
        return run_cfg.comment()

    assert cfg.out is not None
    results = run_sweep(
        data,
        cfg.classifier,
        cfg.train,
        cfg.norms,
        cfg.sweep_seeds,
        out_dir=cfg.out,
        comment=comment,
        debug=cfg.debug,
    )
    with atomic_write(cfg.out / "results.csv") as f:
        f.write(f"# {cfg.comment()}\n")
        results.to_csv(f, index=False)
    logger.info(f"wrote {len(results)} runs to {cfg.out}")

    print(summarize(results).to_csv(index=False, float_format="%.4f"), end="")

    return 0


def _run_eval(cfg: RunConfig) -> int:
    from .train import evaluate, load_checkpoint

    assert cfg.checkpoint is not None
    model = load_checkpoint(cfg.checkpoint)
    _, test_ds = _load_data(cfg)
    loss, acc = evaluate(model, test_ds, batch_size=cfg.train.eval_batch_size)
    print(f"{model}\ntest loss {loss:.6f} accuracy {acc:.4f} ({len(test_ds)} images)")

    return 0


def _run_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import CASES, TOLERANCE, run_gradcheck

    results = run_gradcheck(range(cfg.seeds))
    width = max(len(name) for name in CASES)
    ok = True
    for name in CASES:
        worst = max(r.error for r in results if r.name == name)
        passed = worst < TOLERANCE
        ok &= passed
        print(f"{name:<{width}}  max rel error {worst:.3e}  {'ok' if passed else 'FAILED'}")

    if not ok:
        logger.error(f"gradient check failed (tolerance {TOLERANCE:g})")
    return 0 if ok else 1


def _run_planner(cfg: RunConfig) -> int:
    from .normalization import plan_dwck

    print(plan_dwck(*cfg.dims))

    return 0


def _run_sampling_demo(cfg: RunConfig) -> int:
    from dataclasses import replace

    import pandas as pd

    from .sampling import BUILTIN_SPECS, estimator_report, true_mean

    names: List[str] = list(BUILTIN_SPECS) if cfg.spec == "all" else [cfg.spec]
    reports = []
    for name in names:
        spec = replace(BUILTIN_SPECS[name], n=cfg.n_samples, seed=cfg.train.seed)
        df = estimator_report(spec, cfg.replicates)
        logger.info(
            f"{name}: true value {true_mean(spec):.6g}, "
            f"variance ratio mc/importance "
            f"{df.variance.iloc[0] / max(df.variance.iloc[1], 1e-300):.3g}"
        )
        if cfg.spec == "all":
            df.insert(0, "spec", name)
        reports.append(df)
    report = pd.concat(reports, ignore_index=True)

    if cfg.out is None:
        print(f"# {cfg.comment()}")
        print(report.to_csv(index=False), end="")
    else:
        with atomic_write(cfg.out) as f:
            f.write(f"# {cfg.comment()}\n")
            report.to_csv(f, index=False)
        logger.info(f"wrote report to {cfg.out}")

    return 0


_RUNNERS = {
    "train": _run_train,
    "sweep": _run_sweep,
    "eval": _run_eval,
    "gradcheck": _run_gradcheck,
    "planner": _run_planner,
    "sampling-demo": _run_sampling_demo,
}


def run(cfg: RunConfig) -> int:
    """Execute the subcommand, returning the exit code."""
    logging.getLogger("convnorm").setLevel(logging.DEBUG if cfg.debug else logging.INFO)
    logger.info(cfg.comment())

    return _RUNNERS[cfg.command](cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    cfg = parse_args(argv)
    try:
        return run(cfg)
    except (ValueError, OSError, FloatingPointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
