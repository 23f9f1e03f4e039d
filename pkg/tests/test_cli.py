import subprocess
import sys

import pytest

from atmc.harness import cli
from atmc.harness.checkpoint import load_checkpoint
from atmc.harness.metrics import CSV_FIELDS, read_csv

FLAGS = ["--dataset", "--arch", "--pipeline", "--k", "--bits", "--rho", "--delta", "--attack", "--steps",
         "--epochs", "--seed", "--out"]
QUICK = ["--dataset", "synth8", "--epochs", "1", "--steps", "2", "--delta", "20", "--n-test", "64"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_every_flag(capsys):
    for argv in (["--help"], ["train", "--help"], ["eval", "--help"], ["sweep", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert all(f in text for f in FLAGS), argv


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "atmc.harness.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "sweep" in out.stdout


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", *QUICK, "--pipeline", "atmc", "--k", "800", "--bits", "3", "--out", str(out)])
    assert code == 0
    return out


def test_train_writes_checkpoint_and_row(trained):
    model = load_checkpoint(trained / "model.atmc")
    assert model.total_nnz() <= 800
    (row,) = read_csv(trained / "metrics.csv")
    assert list(row) == CSV_FIELDS
    assert row["pipeline"] == "atmc" and int(row["k"]) == 800 and int(row["bits"]) == 3
    assert int(row["checkpoint_bytes"]) == (trained / "model.atmc").stat().st_size


def test_eval_without_attack_reports_ta_twice(trained, capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--dataset", "synth8", "--checkpoint", str(trained / "model.atmc"),
                       "--attack", "none", "--delta", "0", "--out", str(tmp_path / "e.csv"))
    assert code == 0
    (row,) = read_csv(tmp_path / "e.csv")
    assert row["ta"] == row["ata"] and row["attack"] == "none"
    assert int(row["bits"]) == 3
    ta = out.split()[0].split("=")[1]
    assert out.split()[1] == f"ATA={ta}"


def test_sweep_row_count_and_stable_bytes(capsys, tmp_path):
    argv = ["sweep", *QUICK, "--pipeline", "atmc", "--k-list", "300", "900", "--bits-list", "8", "32"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, *argv, "--out", str(a))[0] == 0
    rows = read_csv(a)
    assert len(rows) == 2 * 2
    assert [(r["k"], r["bits"]) for r in rows] == [("300", "8"), ("300", "32"), ("900", "8"), ("900", "32")]
    assert run(capsys, *argv, "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    png = tmp_path / "p.png"
    code, out, _ = run(capsys, "plot", "--csv", str(a), "--out", str(png))
    assert code == 0 and png.read_bytes()[:4] == b"\x89PNG"


@pytest.mark.parametrize("argv", [
    ["train", "--attack", "none", "--delta", "4"],
    ["train", "--bits", "0"],
    ["train", "--bits", "33"],
    ["train", "--pipeline", "ap", "--bits", "8"],
    ["train", "--pipeline", "atmc_uniform_pq", "--bits", "32"],
    ["train", "--k", "0"],
    ["train", "--arch", "lenet", "--dataset", "synth8"],
    ["train", "--dataset", "cifar"],
    ["train", "--steps", "0"],
    ["sweep", "--pipeline", "da", "--k-list", "10"],
    ["eval", "--checkpoint", "/nonexistent/model.atmc"],
])
def test_invalid_combinations_fail_before_compute(argv, capsys, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("dataset loaded before validation")

    monkeypatch.setattr(cli, "load_dataset", boom)
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert err.startswith("atmc: error: ") and err.count("\n") == 1


def test_k_larger_than_network_is_an_error(capsys):
    code, _, err = run(capsys, "train", "--dataset", "synth8", "--k", "10000000", "--epochs", "0")
    assert code == 2 and "exceeds" in err


def test_bad_flag_is_argparse_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2
