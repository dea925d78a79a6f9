"""Command line: train, resume, ablate, analyze, gen-data, exit codes and artifacts."""

import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from scal import checkpoint, cli, training
from scal.errors import DegenerateVectorError

SMALL = """\
seed = 0
dataset.name = twin_moons
dataset.seed = 0
dataset.n = 30
model.num_classes = 2
model.g_hidden = [6]
model.d_hidden = [6]
training.epochs = {epochs}
training.batch_size = 16
output.directory = {out}
"""


def write_cfg(tmp_path, name="run.cfg", epochs=5, out=None, extra=""):
    out = out or tmp_path / "out"
    path = tmp_path / name
    path.write_text(SMALL.format(epochs=epochs, out=out) + extra)
    return path


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def data_rows(path: Path) -> int:
    return len(path.read_text().splitlines()) - 1


def fail_on_second_epoch(monkeypatch):
    real = training.establish_local_structure
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise DegenerateVectorError("initial centers: zero-norm row(s)")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "establish_local_structure", flaky)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(tmp, epochs=5)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return tmp / "out"


class TestTrain:
    def test_writes_one_row_per_epoch(self, trained):
        assert data_rows(trained / "metrics.csv") == 5
        summary = json.loads((trained / "summary.json").read_text())
        assert 0.0 <= summary["final_target_accuracy"] <= 1.0

    def test_manifest_lists_every_file(self, trained):
        manifest = cli.read_manifest(trained)
        assert manifest["status"] == "ok"
        listed = {f["path"]: f for f in manifest["files"]}
        on_disk = {p.relative_to(trained).as_posix() for p in trained.rglob("*") if p.is_file() and p.name != "manifest.json"}
        assert set(listed) == on_disk
        for rel, entry in listed.items():
            assert entry["sha256"] == sha(trained / rel)
            assert entry["bytes"] == (trained / rel).stat().st_size
        assert "final_target_accuracy" in manifest["terminal"]

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        cfg = write_cfg(tmp_path, epochs=5)
        assert cli.main(["train", "--config", str(cfg)]) == 0
        for name in ("metrics.csv", "summary.json"):
            assert (tmp_path / "out" / name).read_bytes() == (trained / name).read_bytes()

    def test_seed_override_changes_run(self, trained, tmp_path):
        cfg = write_cfg(tmp_path, epochs=5)
        assert cli.main(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "s7")]) == 0
        assert (tmp_path / "s7" / "metrics.csv").read_bytes() != (trained / "metrics.csv").read_bytes()
        assert "seed = 7" in (tmp_path / "s7" / "config.cfg").read_text()

    def test_missing_seed_is_config_error(self, tmp_path, capsys):
        path = tmp_path / "c.cfg"
        path.write_text("training.epochs = 2\n")
        assert cli.main(["train", "--config", str(path)]) == 2
        assert "seed" in capsys.readouterr().err

    def test_config_required_without_resume(self, capsys):
        assert cli.main(["train"]) == 2
        assert "--config" in capsys.readouterr().err

    def test_unknown_ablation_is_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, extra="training.ablation = magic\n")
        assert cli.main(["train", "--config", str(cfg)]) == 2
        assert not (tmp_path / "out").exists()

    def test_failure_keeps_partial_logs(self, tmp_path, monkeypatch):
        fail_on_second_epoch(monkeypatch)
        cfg = write_cfg(tmp_path, epochs=4)
        assert cli.main(["train", "--config", str(cfg)]) == 3
        out = tmp_path / "out"
        assert data_rows(out / "metrics.csv") == 1
        assert "zero-norm" in json.loads((out / "error.json").read_text())["error"]
        manifest = cli.read_manifest(out)
        assert manifest["status"] == "failed"
        assert {"metrics.csv", "error.json"} <= {f["path"] for f in manifest["files"]}
        assert not (out / "checkpoint.ckpt").exists()

    def test_divergence_exit_code(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=2, extra="training.lr0 = 1e200\n")
        with np.errstate(all="ignore"):
            assert cli.main(["train", "--config", str(cfg)]) == 3
        assert cli.read_manifest(tmp_path / "out")["status"] in ("failed", "diverged")

    def test_periodic_checkpoints(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=4, extra="training.checkpoint_every = 2\n")
        assert cli.main(["train", "--config", str(cfg)]) == 0
        names = sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir())
        assert names == ["epoch_0002.ckpt", "epoch_0004.ckpt"]


class TestResume:
    def test_resume_matches_uninterrupted_run(self, trained, tmp_path):
        cfg = write_cfg(tmp_path, epochs=5, extra="training.checkpoint_every = 2\n")
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        mid = tmp_path / "a" / "checkpoints" / "epoch_0002.ckpt"
        assert cli.main(["train", "--resume", str(mid), "--out", str(tmp_path / "b")]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        sa, _ = checkpoint.load(a / "checkpoint.ckpt")
        sb, _ = checkpoint.load(b / "checkpoint.ckpt")
        pa, pb = sa.networks.named_parameters(), sb.networks.named_parameters()
        assert pa.keys() == pb.keys()
        for k in pa:
            assert pa[k].values.tobytes() == pb[k].values.tobytes()
        # the periodic checkpoints leave the trajectory untouched
        assert (a / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_resume_rejects_different_experiment(self, trained, tmp_path):
        other = write_cfg(tmp_path, epochs=5, extra="training.lambda = 0.5\n")
        code = cli.main(["train", "--resume", str(trained / "checkpoint.ckpt"), "--config", str(other), "--out", str(tmp_path / "r")])
        assert code == 2

    def test_resume_accepts_same_experiment_with_new_output(self, trained, tmp_path):
        same = write_cfg(tmp_path, epochs=5, out=tmp_path / "elsewhere")
        code = cli.main(["train", "--resume", str(trained / "checkpoint.ckpt"), "--config", str(same), "--out", str(tmp_path / "r")])
        assert code == 0
        assert (tmp_path / "r" / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_corrupt_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "bad.ckpt"
        blob = bytearray((trained / "checkpoint.ckpt").read_bytes())
        blob[100] ^= 0xFF
        bad.write_bytes(bytes(blob))
        assert cli.main(["train", "--resume", str(bad), "--out", str(tmp_path / "r")]) == 3


class TestModes:
    def test_names_and_levels(self):
        assert cli.parse_modes("scal, no_conditions") == [("scal", {"ablation": "scal"}), ("no_conditions", {"ablation": "no_conditions"})]
        (name, over), = cli.parse_modes("0.5")
        assert name == "noise_0.5" and over["noise_level"] == 0.5 and over["ablation"] == "scal"
        (_, over), = cli.parse_modes("source_only")
        assert over["lam"] == 0.0

    @pytest.mark.parametrize("text", ["", " , ", "magic", "1.5", "-0.1", "scal,scal"])
    def test_rejected(self, text):
        with pytest.raises(cli.ConfigError):
            cli.parse_modes(text)


class TestAblate:
    def test_two_modes(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=2)
        assert cli.main(["ablate", "--config", str(cfg), "--modes", "scal,no_conditions"]) == 0
        with open(tmp_path / "out" / "comparison.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["mode"] for r in rows] == ["scal", "no_conditions"]
        assert all(r["status"] == "ok" and 0.0 <= float(r["final_target_accuracy"]) <= 1.0 for r in rows)
        assert (tmp_path / "out" / "scal" / "manifest.json").is_file()
        assert cli.read_manifest(tmp_path / "out")["status"] == "ok"

    def test_noise_sweep(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=1)
        assert cli.main(["ablate", "--config", str(cfg), "--modes", "0,0.25,0.5,0.75,1"]) == 0
        with open(tmp_path / "out" / "comparison.csv") as fh:
            modes = [r["mode"] for r in csv.DictReader(fh)]
        assert modes == ["noise_0", "noise_0.25", "noise_0.5", "noise_0.75", "noise_1"]
        assert "training.noise_level = 0.75" in (tmp_path / "out" / "noise_0.75" / "config.cfg").read_text()

    def test_empty_modes(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=1)
        assert cli.main(["ablate", "--config", str(cfg), "--modes", ""]) == 2

    def test_failed_variant_spares_siblings(self, tmp_path, monkeypatch):
        real = training.train

        def flaky(cfg, *args, **kwargs):
            if cfg.training.ablation == "kmeans_last_init":
                raise RuntimeError("boom")
            return real(cfg, *args, **kwargs)

        monkeypatch.setattr(training, "train", flaky)
        cfg = write_cfg(tmp_path, epochs=1)
        assert cli.main(["ablate", "--config", str(cfg), "--modes", "scal,kmeans_last_init,no_conditions"]) == 3
        with open(tmp_path / "out" / "comparison.csv") as fh:
            status = {r["mode"]: r["status"] for r in csv.DictReader(fh)}
        assert status == {"scal": "ok", "kmeans_last_init": "failed", "no_conditions": "ok"}
        assert cli.read_manifest(tmp_path / "out")["status"] == "partial"


class TestAnalyze:
    def test_adds_measures_and_boundary(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=2)
        assert cli.main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        before = set(json.loads((out / "summary.json").read_text()))
        assert cli.main(["analyze", str(out), "--resolution", "7"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"a_distance", "ideal_joint_error"} <= set(summary) - before
        assert 0.0 <= summary["a_distance"] <= 2.0
        assert data_rows(out / "boundary.csv") == 49
        manifest = cli.read_manifest(out)
        assert "analyzed" in manifest and "boundary.csv" in {f["path"] for f in manifest["files"]}

    def test_analyze_is_deterministic(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=1)
        assert cli.main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        assert cli.main(["analyze", str(out), "--resolution", "5"]) == 0
        first = (out / "summary.json").read_bytes(), (out / "boundary.csv").read_bytes()
        assert cli.main(["analyze", str(out), "--resolution", "5"]) == 0
        assert ((out / "summary.json").read_bytes(), (out / "boundary.csv").read_bytes()) == first

    def test_three_dimensional_input_skips_boundary(self, tmp_path, caplog):
        path = tmp_path / "b.cfg"
        path.write_text(
            f"seed = 0\ndataset.name = shifted_blobs\ndataset.seed = 0\ndataset.d = 3\ndataset.n = 30\n"
            f"model.num_classes = 3\nmodel.g_hidden = [6]\ntraining.epochs = 1\noutput.directory = {tmp_path / 'out'}\n"
        )
        assert cli.main(["train", "--config", str(path)]) == 0
        with caplog.at_level(logging.WARNING):
            assert cli.main(["analyze", str(tmp_path / "out")]) == 0
        assert "decision boundary export skipped" in caplog.text
        assert not (tmp_path / "out" / "boundary.csv").exists()

    def test_missing_manifest(self, tmp_path):
        assert cli.main(["analyze", str(tmp_path)]) == 3

    def test_corrupt_checkpoint(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=1)
        assert cli.main(["train", "--config", str(cfg)]) == 0
        ckpt = tmp_path / "out" / "checkpoint.ckpt"
        blob = bytearray(ckpt.read_bytes())
        blob[-5] ^= 0x01
        ckpt.write_bytes(bytes(blob))
        assert cli.main(["analyze", str(tmp_path / "out")]) == 3

    def test_failed_run_refused(self, tmp_path, monkeypatch):
        fail_on_second_epoch(monkeypatch)
        cfg = write_cfg(tmp_path, epochs=4)
        assert cli.main(["train", "--config", str(cfg)]) == 3
        assert cli.main(["analyze", str(tmp_path / "out")]) == 3


class TestGenData:
    def test_writes_csv_and_manifest(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["gen-data", "--config", str(cfg)]) == 0
        text = (tmp_path / "out" / "dataset.csv").read_text().splitlines()
        assert text[0] == "x0,x1,label,domain" and len(text) == 1 + 120
        assert cli.read_manifest(tmp_path / "out")["terminal"] == {"source_rows": 60, "target_rows": 60}

    def test_seed_override(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
        assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "scal", "gen-data", "--config", str(cfg)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "scal", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
