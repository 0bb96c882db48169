import csv
import hashlib

import pytest

from sekws.audio import read_wav
from sekws.cli import main
from sekws.harness import build_preset, read_report

DATA = ["--classes", "2", "--per-class", "10"]
QUICK = ["--epochs", "1", "--warmup-epochs", "0", "--batch-size", "8"]


def _tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _synth(out, seed):
    assert main(["synth-data", "--out", str(out), "--classes", "2", "--per-class", "3",
                 "--noise-files", "1", "--noise-seconds", "2", "--seed", str(seed)]) == 0
    return _tree(out)


def test_synth_data_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    first = _synth(tmp_path / "a", 3)
    assert first == _synth(tmp_path / "a", 3)
    assert "manifest.csv" in first
    assert first != _synth(tmp_path / "b", 4)


def test_mix_hits_requested_snr(tmp_path, capsys):
    _synth(tmp_path / "d", 0)
    with open(tmp_path / "d" / "manifest.csv") as fh:
        clean = (tmp_path / "d" / next(csv.DictReader(fh))["path"])
    noise = next((tmp_path / "d").rglob("noise_train*/*.wav"))
    out = tmp_path / "mix.wav"
    assert main(["mix", "--clean", str(clean), "--noise", str(noise), "--snr", "5",
                 "--out", str(out), "--seed", "1"]) == 0
    assert len(read_wav(out).samples) == len(read_wav(clean).samples)
    assert "snr 5.000 dB" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["eval"], ["train-kws", "--out", "x"],
                                  ["matrix", "--out", "x", "--preset", "tiny"],
                                  ["eval", "--seed", "notanint", "--backend", "x"]])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert main(["eval", "--backend", str(tmp_path / "nope.npz")] + DATA) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not an archive")
    assert main(["eval", "--backend", str(junk)] + DATA) == 1
    assert "sekws eval:" in capsys.readouterr().err


def test_train_eval_sweep_plot(tmp_path):
    kws_dir = tmp_path / "kws"
    assert main(["train-kws", "--condition", "noisy", "--out", str(kws_dir)] + DATA + QUICK) == 0
    backend = kws_dir / "checkpoints" / "backend.npz"
    se_dir = tmp_path / "se"
    assert main(["train-se", "--out", str(se_dir)] + DATA + QUICK) == 0
    frontend = se_dir / "checkpoints" / "frontend.npz"

    ev = tmp_path / "eval"
    assert main(["eval", "--backend", str(backend), "--frontend", str(frontend), "--alpha", "0.5",
                 "--out", str(ev)] + DATA) == 0
    (row,) = read_report(ev / "report.csv")
    assert 0.0 <= float(row["acc_noisy"]) <= 1.0
    with open(ev / "accuracy.csv") as fh:
        assert {r["model_id"] for r in csv.DictReader(fh)} == {"M2"}

    sweep = tmp_path / "sweep.csv"
    assert main(["sweep-alpha", "--backend", str(backend), "--frontend", str(frontend),
                 "--points", "5", "--out", str(sweep)] + DATA) == 0
    assert len(sweep.read_text().splitlines()) == 6
    assert main(["plot", "--sweep", str(sweep), "--out", str(tmp_path / "p.png")]) == 0
    assert (tmp_path / "p.png").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("epochs = 3\nwarmup_epochs = 0\npeak_lr = 0.05\n")
    out = tmp_path / "run"
    assert main(["train-kws", "--condition", "clean", "--out", str(out), "--config", str(cfg),
                 "--epochs", "1", "--batch-size", "8"] + DATA) == 0
    text = (out / "config.txt").read_text()
    assert "epochs = 1" in text and "peak_lr = 0.05" in text


def test_matrix_report_has_one_row_per_spec_row(desk_matrix):
    assert len(desk_matrix.rows) == len(build_preset("desk").rows)
