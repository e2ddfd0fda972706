import csv
import glob
import json
import os
from pathlib import Path

import pytest

from merba.cli import build_parser, run

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ("scan", "shapes", "paramcount", "synth", "train", "eval", "saliency", "gradcheck")


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(out):
    return dict(line.split(",", 1) for line in out.splitlines() if "," in line)


@pytest.fixture
def columns(monkeypatch):
    # argparse wraps help text to the terminal width
    monkeypatch.setenv("COLUMNS", "100")


@pytest.mark.parametrize("command", (None,) + COMMANDS)
def test_help_matches_golden(capsys, columns, command):
    argv = ["--help"] if command is None else [command, "--help"]
    code, out, _ = call(capsys, *argv)
    assert code == 0
    path = GOLDEN / f"help_{command or 'merba'}.txt"
    if os.environ.get("MERBA_UPDATE_GOLDEN"):
        path.write_text(out)
    assert out == path.read_text()


def test_every_command_has_golden_help():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == set(COMMANDS)


def test_scan_order(capsys):
    code, out, _ = call(capsys, "scan", "--direction", "a", "--height", 3, "--width", 3)
    assert code == 0 and out.strip() == "0,1,2,3,4,5,6,7,8"
    code, out, _ = call(capsys, "scan", "--direction", "b", "--height", 3, "--width", 3, "--grid")
    assert out.splitlines() == ["0 3 6", "1 4 7", "2 5 8"]


def test_scan_plot(capsys, tmp_path):
    code, _, err = call(capsys, "scan", "--direction", "c", "--plot", "--out", tmp_path)
    assert code == 0
    assert len(glob.glob(str(tmp_path / "*-scan-seed0" / "scan.png"))) == 1


def test_shapes(capsys):
    code, out, err = call(capsys, "shapes", "--config", "default")
    assert code == 0
    assert "stage2: 28x28x256 -> 14x14x512" in out
    assert out.splitlines()[-1] == "features: 1x1024"
    assert err.startswith("# flags ") and "\n# config " in err


def test_paramcount(capsys, tmp_path):
    code, out, _ = call(capsys, "paramcount", "--csv", "--out", tmp_path)
    rows = kv(out)
    assert code == 0 and rows["reference"].startswith("101210000")
    total = int(rows["total"].split(",")[0])
    assert abs(total - 101_210_000) / 101_210_000 < 0.05
    (path,) = glob.glob(str(tmp_path / "*" / "params.csv"))
    assert list(csv.reader(open(path)))[0] == ["module", "params", "share"]


def test_set_override(capsys):
    code, out, err = call(capsys, "shapes", "--config", "mini", "--set", "model.input_size=112")
    assert code == 0 and "patch_embed: 112x112x3 -> 28x28x16" in out
    assert '"model.input_size": 112' in err


@pytest.mark.parametrize("argv", [
    ["nonsense"],
    ["scan", "--direction", "z"],
    ["scan", "--height", "0"],
    ["shapes", "--config", "no-such-preset"],
    ["shapes", "--set", "model.depth=3"],
    ["shapes", "--set", "broken"],
    ["eval"],
    ["train", "--data", "/no/such/dir"],
])
def test_invalid_input_exit_code(capsys, tmp_path, argv):
    code, out, err = call(capsys, *argv, "--out", tmp_path) if argv[0] != "nonsense" \
        else call(capsys, *argv)
    assert code == 1 and "merba: error:" in err and out == ""


def test_gradcheck_failure_exit_code(capsys, tmp_path):
    code, out, _ = call(capsys, "gradcheck", "--tolerance", 1e-30, "--max-entries", 1)
    assert code == 2 and "FAIL" in out


def test_eval_perfect_predictions(capsys, tmp_path):
    pred = tmp_path / "p.csv"
    pred.write_text("truth,pred\nhappiness,happiness\nfear,fear\nsurprise,surprise\n")
    code, out, _ = call(capsys, "eval", "--predictions", pred, "--out", tmp_path)
    assert code == 0
    assert kv(out) == {"uf1": "1.000000", "uar": "1.000000", "acc": "1.000000"}
    (run_dir,) = glob.glob(str(tmp_path / "*-eval-seed0"))
    for name in ("eval_confusion.csv", "eval_report.json", "eval_confusion.png", "config.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name


def test_eval_rejects_unknown_label(capsys, tmp_path):
    pred = tmp_path / "p.csv"
    pred.write_text("truth,pred\njoy,fear\n")
    assert call(capsys, "eval", "--predictions", pred, "--out", tmp_path)[0] == 1


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--config", "tiny", "--n-per-class", "2", "--subjects", "4",
                "--out", str(out)]) == 0
    (path,) = glob.glob(str(out / "*" / "data"))
    return path


def test_end_to_end(capsys, tmp_path, dataset):
    code, out, _ = call(capsys, "train", "--config", "tiny", "--data", dataset, "--epochs", 3,
                        "--set", "train.warmup_epochs=1", "--set", "train.cooldown_epochs=1",
                        "--set", "train.val_fraction=0.25", "--out", tmp_path)
    assert code == 0 and kv(out)["epochs"] == "3"
    (run_dir,) = glob.glob(str(tmp_path / "*-train-seed0"))
    for name in ("log.csv", "loss.png", "train_confusion.csv", "train_confusion.png",
                 "val_report.json", "config.json", "flags.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    ck = os.path.join(run_dir, "checkpoint")

    code, out, _ = call(capsys, "eval", "--checkpoint", ck, "--data", dataset, "--out", tmp_path)
    assert code == 0 and set(kv(out)) == {"uf1", "uar", "acc"}

    code, out, _ = call(capsys, "saliency", "--checkpoint", ck, "--data", dataset, "--index", 1,
                        "--out", tmp_path)
    assert code == 0 and kv(out)["map"] == "1x1"
    (sal,) = glob.glob(str(tmp_path / "*-saliency-seed0"))
    assert {"cam.pgm", "overlay.png"} <= set(os.listdir(sal))


def test_train_divergence_exit_code(capsys, tmp_path, dataset):
    code, _, err = call(capsys, "train", "--config", "tiny", "--data", dataset, "--epochs", 3,
                        "--set", "train.peak_lr=1e30", "--set", "train.warmup_epochs=1",
                        "--set", "train.cooldown_epochs=1", "--out", tmp_path)
    assert code == 2 and "numerical failure" in err


def test_training_is_deterministic_given_seed(capsys, tmp_path, dataset):
    logs = []
    for i in range(2):
        out = tmp_path / str(i)
        code, _, _ = call(capsys, "train", "--config", "tiny", "--data", dataset, "--epochs", 2,
                          "--set", "train.warmup_epochs=1", "--set", "train.cooldown_epochs=0",
                          "--seed", 7, "--out", out)
        assert code == 0
        (log,) = glob.glob(str(out / "*" / "log.csv"))
        logs.append(open(log).read())
    assert logs[0] == logs[1]


def test_config_written_to_run_dir(capsys, tmp_path, dataset):
    call(capsys, "eval", "--predictions", "/dev/null", "--out", tmp_path)   # rejected: no header
    assert not glob.glob(str(tmp_path / "*"))
    pred = tmp_path / "p.csv"
    pred.write_text("truth,pred\n0,0\n")
    call(capsys, "eval", "--predictions", pred, "--seed", 3, "--set", "train.batch_size=4",
         "--out", tmp_path / "r")
    (cfg,) = glob.glob(str(tmp_path / "r" / "*" / "config.json"))
    flat = json.load(open(cfg))
    assert json.dumps(flat).count("batch_size") == 1
