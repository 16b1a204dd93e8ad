import subprocess
import sys

import pytest

from dualflow.cli import cli_dispatch
from dualflow.io import read_metrics_csv

from pipeline import ARTIFACTS, full_pipeline, run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return full_pipeline(tmp_path_factory.mktemp("cli"))


def test_help_exits_zero(capsys):
    assert cli_dispatch(["--help"]) == 0
    assert "attack-train" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dualflow.cli", "ablate", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--variants" in out.stdout


def test_missing_seed_fails(tmp_path, capsys):
    assert cli_dispatch(["attack-train", "--out", str(tmp_path)]) != 0
    assert "--seed" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert cli_dispatch(["frobnicate"]) != 0
    assert cli_dispatch(["gen-data", "--seed", "1", "--bogus", "2"]) != 0
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    assert cli_dispatch(["attack-train", "--seed", "0", "--out", str(tmp_path)]) == 2
    assert "--velocity" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    assert cli_dispatch(["gen-data", "--seed", "0", "--config", str(tmp_path / "bad.cfg"),
                         "--out", str(tmp_path)]) == 2


def test_pipeline_writes_artifacts(workdir):
    for name in ARTIFACTS:
        assert (workdir / name).is_file(), name
    header, rows = read_metrics_csv(workdir / "eval.csv")
    assert header[:3] == ["victim", "white_box", "asr"]
    assert [r[0] for r in rows] == ["src", "vic", "black-box-mean"]
    assert float(rows[2][2]) == float(rows[1][2])
    _, att = read_metrics_csv(workdir / "attack_metrics.csv")
    assert len(att) == 3 * 6


def test_ablate_row_count(workdir):
    out = workdir / "ablate"
    out.mkdir()
    (out / "run.cfg").write_text((workdir / "run.cfg").read_text())
    code = run("ablate", out, "--seed", "7", "--data", str(workdir / "data.bin"),
               "--velocity", str(workdir / "velocity.ckpt"), "--classifier", str(workdir / "classifier_src.ckpt"),
               "--variants", "co,rs", "--steps", "1,2,4,8", "--train-steps", "2", "--batch-size", "4")
    assert code == 0
    header, rows = read_metrics_csv(out / "ablate.csv")
    assert header == ["variant", "gamma", "n_steps", "asr"] and len(rows) == 8


def test_verify_morse_command(tmp_path):
    assert cli_dispatch(["verify-morse", "--problem", "bowl", "--grid", "7", "--out", str(tmp_path)]) == 0
    _, rows = read_metrics_csv(tmp_path / "morse.csv")
    assert rows[0][0] == "bowl" and rows[0][-1] == "1"


def test_verify_cascade_command(workdir, tmp_path):
    clf = tmp_path
    (clf / "run.cfg").write_text((workdir / "run.cfg").read_text())
    assert run("train-classifier", clf, "--seed", "1", "--data", str(workdir / "data.bin"), "--arch", "mlp",
               "--activation", "silu", "--name", "smooth") == 0
    assert run("verify-cascade", clf, "--seed", "1", "--data", str(workdir / "data.bin"),
               "--velocity", str(workdir / "velocity.ckpt"), "--classifier", str(clf / "classifier_smooth.ckpt"),
               "--n-samples", "4", "--t", "0.125") == 0
    _, rows = read_metrics_csv(clf / "cascade.csv")
    assert int(rows[0][3]) == 4
