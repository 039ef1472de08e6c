import subprocess
import sys

import pytest

from capskit.cli import EXIT_ASSERT, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from capskit.report import parse_csv

TINY = """
[run]
samplers = caps, maxpool
seeds = 0
n_raw = 2
n_test_raw = 1

[net]
base_channels = 4
capd_widths = 4, 4

[raw]
size = 96
border = 20
radius = 2, 4

[protocol]
crop_size = 32
margin = 8
max_offsets_per_subset = 4

[train]
max_epochs = 1

[verify]
n_shifts = 8
size = 16
n_seeds = 3
interior_margin = 8

[ablate]
betas = 0, 0.25
temperatures = 0.001, 1
grid = false
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_verify_default_passes(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "got [2, 4, 3]" in out and "got [3, 4, 5]" in out
    assert "circular equivalence maxpool,fail,fail (expected)" in out
    assert (tmp_path / "checks.csv").exists()


def test_verify_with_attention_reports_failure(tmp_path, capsys):
    # odd column shifts swap neighbouring components, which the circular
    # attention conv does not commute with; the exact suite must say so
    cfg = tmp_path / "ca.ini"
    cfg.write_text("[verify]\nuse_ca = true\nn_seeds = 2\n")
    code = main(["verify", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"])
    assert code == EXIT_ASSERT
    assert "FAILED gamma parity relation" in capsys.readouterr().err


def test_train_rows_and_determinism(tiny, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(tiny), "--out", str(a), "--checkpoints"]) == EXIT_OK
    assert main(["train", "--config", str(tiny), "--out", str(b)]) == EXIT_OK
    rows = parse_csv((a / "results.csv").read_text())
    methods = [(r["method"], r["set"]) for r in rows]
    assert methods == [("caps", "mdt"), ("caps", "bdt"), ("caps@T=1", "mdt"), ("caps@T=1", "bdt"),
                       ("maxpool", "mdt"), ("maxpool", "bdt")]
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "checkpoints" / "caps_seed0.ckpt").exists()


def test_train_overrides(tiny, tmp_path):
    code = main(["train", "--config", str(tiny), "--out", str(tmp_path), "--sampler", "aps",
                 "--set", "bdt", "--seed", "2"])
    assert code == EXIT_OK
    rows = parse_csv((tmp_path / "results.csv").read_text())
    assert [(r["method"], r["set"], r["seed"]) for r in rows] == [("aps", "bdt", 2)]


def test_ablate_sweeps(tiny, tmp_path):
    assert main(["ablate", "--config", str(tiny), "--out", str(tmp_path)]) == EXIT_OK
    rows = parse_csv((tmp_path / "ablation.csv").read_text())
    names = {r["method"] for r in rows}
    assert {"caps", "caps@T=0.001", "caps@T=1", "caps@beta=0", "caps@beta=0.25"} <= names
    assert (tmp_path / "ablation_sweeps.svg").exists()


def test_generate_and_train_from_disk(tiny, tmp_path):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(tiny), "--out", str(data)]) == EXIT_OK
    assert (data / "manifest.csv").exists()
    text = TINY.replace("n_test_raw = 1", f"n_test_raw = 1\ndata = {data}")
    tiny.write_text(text)
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "r"),
                 "--sampler", "maxpool"]) == EXIT_OK


def test_report_rerenders(tiny, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(run), "--sampler", "maxpool"]) == 0
    before = (run / "results.csv").read_bytes()
    (run / "results.csv").unlink()
    assert main(["report", "--out", str(run)]) == EXIT_OK
    assert (run / "results.csv").read_bytes() == before


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nwhat = 1\n")
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--sampler", "strided", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--beta", "0.7", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_io_errors(tmp_path, tiny, monkeypatch):
    assert main(["verify", "--config", str(tmp_path / "missing.ini")]) == EXIT_IO
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_IO
    garbage = tmp_path / "record.json"
    garbage.write_text("{not json")
    assert main(["report", str(garbage), "--out", str(tmp_path)]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["verify", "--config", str(tiny), "--out", str(blocker / "sub")]) == EXIT_IO
    text = TINY.replace("n_test_raw = 1", f"n_test_raw = 1\ndata = {tmp_path / 'nodata'}")
    tiny.write_text(text)
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "r")]) == EXIT_IO


def test_threads_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("CAPSKIT_THREADS", "lots")
    assert main(["train", "--config", str(tiny), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "capskit", "verify", "--out", str(tmp_path)],
                         capture_output=True, text=True, timeout=120)
    assert out.returncode == 0, out.stderr
    assert out.stdout.startswith("method,set,mIoU")
