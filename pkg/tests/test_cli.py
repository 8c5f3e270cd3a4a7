"""
Test the cli module
"""

from pathlib import Path

import pytest

from convnorm.cli import main, parse_args
from convnorm.gradcheck import CASES
from convnorm.model import NormKind
from convnorm.train import read_metrics_csv


def output_lines(capsys):
    """Captured stdout without log records."""
    return [ln for ln in capsys.readouterr().out.splitlines() if not ln.startswith("[")]


def test_parse_train_defaults():
    cfg = parse_args(["train"])
    assert cfg.command == "train"
    assert cfg.classifier.norm is NormKind.NONE
    assert cfg.train.lr == 0.01
    assert cfg.train.batch_size == 32
    assert cfg.train.epochs == 10
    assert cfg.out == Path("metrics.csv")
    assert cfg.checkpoint is None


def test_parse_train_options():
    cfg = parse_args(
        [
            "train",
            "--norm=dwck",
            "--lr=0.025",
            "--batch-size=16",
            "--epochs=3",
            "--seed=7",
            "--width-scale=0.25",
            "--jitter=0",
            "--no-affine",
            "--no-project",
            "--train-subset=200",
        ]
    )
    assert cfg.classifier.norm is NormKind.DWCK
    assert cfg.classifier.width_scale == 0.25
    assert cfg.classifier.jitter == 0
    assert not cfg.classifier.affine
    assert cfg.train.lr == 0.025
    assert cfg.train.batch_size == 16
    assert cfg.train.seed == 7
    assert not cfg.train.project_nonneg
    assert cfg.train_subset == 200


def test_parse_other_commands():
    assert parse_args(["planner", "--dims", "31x17"]).dims == (31, 17)
    assert parse_args(["gradcheck", "--seeds", "3"]).seeds == 3
    cfg = parse_args(["sampling-demo", "--spec", "gaussian-tail", "--replicates", "5", "--n", "50"])
    assert (cfg.spec, cfg.replicates, cfg.n_samples) == ("gaussian-tail", 5, 50)
    cfg = parse_args(["eval", "--checkpoint", "m.ckpt", "--batch-size", "64"])
    assert cfg.checkpoint == Path("m.ckpt")
    assert cfg.train.eval_batch_size == 64


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fit"],
        ["train", "--norm", "foo"],
        ["train", "--lr", "0"],
        ["train", "--jitter", "0.7"],
        ["train", "--val-subset", "0"],
        ["planner", "--dims", "32"],
        ["eval"],
        ["sampling-demo", "--spec", "nope"],
    ],
)
def test_invalid_args_exit_2(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == 2


def test_comment_excludes_output_paths():
    a = parse_args(["train", "--out", "a.csv", "--checkpoint", "a.ckpt"]).comment()
    b = parse_args(["train", "--out", "b.csv"]).comment()
    assert a == b
    assert a.startswith("config command=train ")
    assert "classifier.norm=none" in a
    assert "train.lr=0.01" in a


def test_planner(capsys):
    assert main(["planner", "--dims", "32x32"]) == 0
    out = output_lines(capsys)
    assert out[0] == "dims 32x32 -> padded 32x32"
    assert out[1] == "  stage 1: DWCK kernel (4,4) stride (4,4)"
    assert len(out) == 6
    assert out[-1].startswith("weights per channel: 28 (single 32x32 kernel: 1024")


def test_planner_padding(capsys):
    assert main(["planner", "--dims", "31x31"]) == 0
    assert output_lines(capsys)[0] == "dims 31x31 -> padded 32x32"


def test_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = output_lines(capsys)
    assert len(out) == len(CASES)
    assert all(ln.endswith("ok") for ln in out)


def test_sampling_demo_stdout(capsys):
    argv = ["sampling-demo", "--spec", "normal-shift", "--replicates", "3", "--n", "100"]
    assert main(argv) == 0
    out = output_lines(capsys)
    assert out[0].startswith("# config command=sampling-demo")
    assert out[1] == "method,mean,variance,n,seed"
    assert [ln.split(",")[0] for ln in out[2:]] == ["mc", "importance"]


def test_sampling_demo_all_to_file(tmp_path):
    fp = tmp_path / "report.csv"
    assert main(["sampling-demo", "--replicates", "2", "--n", "100", "--out", str(fp)]) == 0
    df = read_metrics_csv(fp)
    assert list(df.columns) == ["spec", "method", "mean", "variance", "n", "seed"]
    assert len(df) == 8
    assert df.spec.unique().tolist() == ["normal-shift", "exponential", "mixture", "gaussian-tail"]


def train_argv(data_dir, out, *extra):
    return [
        "train",
        f"--data-dir={data_dir}",
        "--norm=dwck",
        "--width-scale=0.1",
        "--epochs=1",
        "--batch-size=10",
        "--train-subset=20",
        "--val-subset=20",
        "--no-wall-time",
        f"--out={out}",
        *extra,
    ]


def test_train_and_eval(cifar_dir, tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    ckpt = tmp_path / "model.ckpt"
    assert main(train_argv(cifar_dir, out, f"--checkpoint={ckpt}")) == 0

    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config command=train")
    assert "classifier.norm=dwck" in lines[0]
    df = read_metrics_csv(out)
    assert len(df) == 1
    assert df.epoch.tolist() == [1]
    assert df.wall_time_s.tolist() == [0]
    assert ckpt.is_file()

    capsys.readouterr()
    assert main(["eval", f"--data-dir={cifar_dir}", f"--checkpoint={ckpt}"]) == 0
    out_lines = output_lines(capsys)
    assert out_lines[0].startswith("Model(norm=dwck")
    assert out_lines[1].startswith("test loss ")
    assert out_lines[1].endswith("(20 images)")


def test_train_csv_is_reproducible(cifar_dir, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(train_argv(cifar_dir, a)) == 0
    assert main(train_argv(cifar_dir, b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_missing_data_exit_1(tmp_path):
    assert main(train_argv(tmp_path / "nowhere", tmp_path / "m.csv")) == 1
    assert not (tmp_path / "m.csv").exists()


def test_eval_missing_checkpoint_exit_1(cifar_dir, tmp_path):
    argv = ["eval", f"--data-dir={cifar_dir}", f"--checkpoint={tmp_path / 'nope.ckpt'}"]
    assert main(argv) == 1


def test_parse_sweep_defaults():
    cfg = parse_args(["sweep"])
    assert cfg.norms == tuple(NormKind)
    assert cfg.sweep_seeds == (1, 2, 3)
    assert cfg.classifier.width_scale == 0.25
    assert (cfg.train_subset, cfg.val_subset) == (5000, 1000)
    assert (cfg.train.lr, cfg.train.batch_size, cfg.train.epochs) == (0.01, 32, 10)
    assert cfg.out == Path("sweep")
    assert "norms=none,batch,dwck,learned sweep_seeds=1,2,3" in cfg.comment()


@pytest.mark.parametrize("argv", [["sweep", "--norms", "foo"], ["sweep", "--seeds"]])
def test_invalid_sweep_args_exit_2(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == 2


def test_sweep_matches_train_runs(cifar_dir, tmp_path, capsys):
    options = [
        f"--data-dir={cifar_dir}",
        "--width-scale=0.1",
        "--epochs=1",
        "--batch-size=10",
        "--train-subset=20",
        "--val-subset=10",
        "--no-wall-time",
    ]
    out = tmp_path / "sweep"
    argv = ["sweep", *options, "--norms", "none", "dwck", "--seeds", "1", "2", f"--out={out}"]
    assert main(argv) == 0

    lines = output_lines(capsys)
    assert lines[0] == "norm,train_acc,val_loss,val_acc,val_acc_margin"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["none", "dwck"]
    assert lines[1].endswith(",0.0000")

    results = read_metrics_csv(out / "results.csv")
    assert len(results) == 4
    assert sorted(fp.name for fp in out.glob("*-seed*.csv")) == [
        "dwck-seed1.csv",
        "dwck-seed2.csv",
        "none-seed1.csv",
        "none-seed2.csv",
    ]

    fp = tmp_path / "train.csv"
    assert main(["train", *options, "--norm=dwck", "--seed=2", f"--out={fp}"]) == 0
    assert fp.read_bytes() == (out / "dwck-seed2.csv").read_bytes()
