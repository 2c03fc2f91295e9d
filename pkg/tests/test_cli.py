import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from wmhseg.cli import main
from wmhseg.datamodel import load_manifest


def run_cli(*args):
    return main([str(a) for a in args])


def dir_digest(root: Path, exclude=("train_log.tsv", "timing.txt")) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_synth")
    code = run_cli("synth", "--patients", 3, "--slices", 4, "--size", 32,
                   "--radius", "2:5", "--seed", 3, "--out", root)
    assert code == 0
    return root


class TestSynth:
    def test_counting(self, tmp_path):
        out = tmp_path / "d"
        assert run_cli("synth", "--patients", 4, "--slices", 8, "--size", 32, "--seed", 7, "--out", out) == 0
        manifest = load_manifest(out / "manifest.tsv")
        assert len(manifest) == 32

    def test_bad_flags_exit_2(self, tmp_path, capsys):
        code = run_cli("synth", "--patients", 0, "--out", tmp_path / "x")
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("wmhseg-error\tcode=2\tkind=config\tmsg=")

    def test_deterministic_directory_digest(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("synth", "--patients", 2, "--slices", 2, "--size", 32, "--seed", 5, "--out", out) == 0
        assert dir_digest(a) == dir_digest(b)

    def test_jitter_doubles_records(self, tmp_path):
        out = tmp_path / "j"
        assert run_cli("synth", "--patients", 2, "--slices", 2, "--size", 32,
                       "--jitter", 2, "--seed", 1, "--out", out) == 0
        assert len(load_manifest(out / "manifest.tsv")) == 8


class TestAugment:
    def test_materializes_variants(self, synth_dir, tmp_path):
        out = tmp_path / "aug"
        code = run_cli("augment", "--manifest", synth_dir / "manifest.tsv", "--out", out,
                       "--rotations=-10,10", "--target-size", 32)
        assert code == 0
        manifest = load_manifest(out / "manifest.tsv")
        assert len(manifest) == 4 * 12


class TestTrain:
    def test_one_epoch_exit_zero(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--model", "unet", "--preset", "desk", "--epochs", 1,
                       "--data", synth_dir / "manifest.tsv", "--seed", 0, "--out", out)
        assert code == 0
        assert (out / "best.ckpt").exists()
        assert (out / "train_log.tsv").exists()
        assert (out / "config.ini").exists()
        assert (out / "training_curves.png").exists()
        assert (out / "predictions.png").exists()
        assert list((out / "predictions").glob("*.wmhs"))

    def test_nan_abort_exit_4(self, synth_dir, tmp_path, capsys):
        code = run_cli("train", "--model", "unet", "--preset", "desk", "--epochs", 3,
                       "--lr", 1e25, "--data", synth_dir / "manifest.tsv", "--out", tmp_path / "x")
        assert code == 4
        assert "kind=numerical" in capsys.readouterr().err

    def test_missing_manifest_exit_3(self, tmp_path, capsys):
        code = run_cli("train", "--model", "unet", "--data", tmp_path / "absent.tsv", "--out", tmp_path / "o")
        assert code == 3
        assert "kind=io" in capsys.readouterr().err


@pytest.fixture(scope="module")
def kfold_run_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_kfold")
    code = run_cli("kfold", "--model", "unet", "--preset", "desk", "--epochs", 2,
                   "--k", 2, "--seed", 4, "--data", synth_dir / "manifest.tsv", "--out", out)
    assert code == 0
    return out


class TestKFold:
    @pytest.fixture
    def kfold_out(self, kfold_run_dir):
        return kfold_run_dir

    def test_report_bundle(self, kfold_out):
        report = (kfold_out / "report.txt").read_text()
        assert "per-fold aggregation" in report
        assert "per-slice aggregation" in report
        assert (kfold_out / "tables.json").exists()
        assert (kfold_out / "scores.tsv").exists()
        assert (kfold_out / "timing.txt").exists()
        assert (kfold_out / "scores.png").exists()
        assert (kfold_out / "training_curves.png").exists()

    def test_fold_outputs(self, kfold_out):
        assert (kfold_out / "fold0" / "best.ckpt").exists()
        assert (kfold_out / "fold1" / "best.ckpt").exists()

    def test_config_dump_rerun_identical(self, kfold_out, tmp_path):
        rerun = tmp_path / "rerun"
        code = run_cli("kfold", "--config", kfold_out / "config.ini", "--out", rerun)
        assert code == 0
        a, b = dir_digest(kfold_out), dir_digest(rerun)
        ignore = {"config.ini"}  # differs only in its output_dir line
        assert {k: v for k, v in a.items() if k not in ignore} == {k: v for k, v in b.items() if k not in ignore}


class TestCrossEval:
    def test_table6_shape(self, synth_dir, tmp_path):
        train_out = tmp_path / "train"
        assert run_cli("train", "--model", "unet", "--preset", "desk", "--epochs", 2,
                       "--data", synth_dir / "manifest.tsv", "--seed", 1, "--out", train_out) == 0
        sites = []
        for i, name in enumerate(("Singapore", "GE3T")):
            site = tmp_path / name
            assert run_cli("synth", "--patients", 2, "--slices", 2, "--size", 32,
                           "--dataset", name, "--seed", 20 + i, "--out", site) == 0
            sites.append(site / "manifest.tsv")
        out = tmp_path / "xeval"
        code = run_cli("crosseval", "--checkpoint", train_out / "best.ckpt",
                       "--eval", ",".join(map(str, sites)), "--out", out)
        assert code == 0
        report = (out / "report.txt").read_text()
        assert "Singapore" in report and "GE3T" in report and "Average" in report
        assert (out / "scores.png").exists()

        # report re-render with gains against itself -> zero deltas
        out2 = tmp_path / "rerender"
        code = run_cli("report", "--run", out, "--gain-against", out, "--format", "markdown", "--out", out2)
        assert code == 0
        md = (out2 / "report.md").read_text()
        assert "+0.000" in md and "DSC gain" in md

    def test_checkpoint_required(self, tmp_path, capsys):
        assert run_cli("crosseval", "--eval", "x.tsv", "--out", tmp_path) == 2


class TestRunConfig:
    def test_unknown_key_rejected(self, synth_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[hyper]\nepochz = 3\n")
        code = run_cli("train", "--config", cfg, "--data", synth_dir / "manifest.tsv", "--out", tmp_path / "o")
        assert code == 2
        assert "unknown key" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[extra]\nx = 1\n")
        assert run_cli("train", "--config", cfg, "--data", "d.tsv", "--out", tmp_path / "o") == 2

    def test_flags_override_file(self, synth_dir, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[hyper]\nepochs = 5\n[model]\nkind = unet\n")
        out = tmp_path / "o"
        code = run_cli("train", "--config", cfg, "--preset", "desk", "--epochs", 1,
                       "--data", synth_dir / "manifest.tsv", "--out", out)
        assert code == 0
        dumped = (out / "config.ini").read_text()
        assert "epochs = 1" in dumped
        assert "kind = unet" in dumped


class TestConsole:
    def test_version_and_help(self):
        out = subprocess.run([sys.executable, "-m", "wmhseg.cli", "--version"],
                             capture_output=True, text=True)
        assert out.returncode == 0
        assert out.stdout.startswith("wmhseg ")
        for cmd in ("synth", "augment", "train", "kfold", "crosseval", "report"):
            h = subprocess.run([sys.executable, "-m", "wmhseg.cli", cmd, "--help"],
                               capture_output=True, text=True)
            assert h.returncode == 0
            assert cmd in h.stdout

    def test_usage_error_exit_2(self):
        out = subprocess.run([sys.executable, "-m", "wmhseg.cli", "synth"],
                             capture_output=True, text=True)
        assert out.returncode == 2
