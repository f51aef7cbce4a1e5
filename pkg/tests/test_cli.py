import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ksrecon.cli import main
from ksrecon.data import load_image
from ksrecon.kspace import SamplingMask


def run_cli(*argv):
    return main([str(a) for a in argv])


def tree_digest(root, skip=("run_manifest.json",)):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name in skip:
                continue
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            h.update(rel.encode())
            with open(os.path.join(dirpath, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """One small synth+train pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("toy")
    mask_path = root / "mask.txt"
    assert run_cli("mask", "--lines", 32, "--factor", 4, "--kind", "custom",
                   "--out", mask_path) == 0
    data_dir = root / "data"
    assert run_cli("synth", "--n", 10, "--shape", "32x32", "--mask", mask_path,
                   "--out", data_dir, "--seed", 3) == 0
    run_dir = root / "run"
    config = root / "config.json"
    config.write_text(json.dumps(
        {"train": {"epochs": 40, "batch_size": 4, "lr": 3e-3},
         "model": {"depth": 2, "base_width": 4, "num_layers": 1}}))
    assert run_cli("train", "--data", data_dir, "--model", "multimodal",
                   "--config", config, "--out", run_dir, "--seed", 5) == 0
    return {"root": root, "mask": mask_path, "data": data_dir,
            "run": run_dir, "config": config}


class TestMaskCommand:
    def test_custom_292_reports_73(self, tmp_path, capsys):
        out = tmp_path / "m.txt"
        assert run_cli("mask", "--lines", 292, "--factor", 4, "--kind", "custom",
                       "--center-frac", 0.8, "--out", out) == 0
        printed = capsys.readouterr().out
        assert "73" in printed and "292" in printed
        mask = SamplingMask.load(out)
        assert mask.n_kept == 73

    def test_factor_one_keeps_everything(self, tmp_path, capsys):
        out = tmp_path / "m.txt"
        assert run_cli("mask", "--lines", 64, "--factor", 1, "--kind", "center",
                       "--out", out) == 0
        assert "64 of 64" in capsys.readouterr().out
        assert SamplingMask.load(out).n_kept == 64

    def test_invalid_center_fraction_exits_2(self, tmp_path, capsys):
        out = tmp_path / "m.txt"
        code = run_cli("mask", "--lines", 64, "--factor", 4, "--kind", "custom",
                       "--center-frac", 1.2, "--out", out)
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_mask_file_round_trip(self, tmp_path):
        out = tmp_path / "m.txt"
        run_cli("mask", "--lines", 48, "--factor", 2, "--kind", "custom",
                "--center-frac", 0.5, "--out", out)
        mask = SamplingMask.load(out)
        assert mask.length == 48
        assert mask.config.center_fraction == 0.5


class TestSynthCommand:
    def test_counts_files_and_manifest(self, toy_run):
        data = toy_run["data"]
        names = sorted(os.listdir(data))
        raws = [n for n in names if n.endswith(".raw")]
        assert len(raws) == 30  # 3 images per triple
        assert "manifest.jsonl" in names
        assert "dataset.json" in names
        assert "run_manifest.json" in names
        lines = (data / "manifest.jsonl").read_text().strip().splitlines()
        assert len(lines) == 10
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "seed", "mask_id", "paths"}

    def test_missing_mask_exits_2(self, tmp_path, capsys):
        code = run_cli("synth", "--n", 1, "--shape", "32x32",
                       "--mask", tmp_path / "absent.txt", "--out", tmp_path / "d")
        assert code == 2

    def test_shape_mask_mismatch_exits_2(self, tmp_path):
        mask_path = tmp_path / "m.txt"
        run_cli("mask", "--lines", 64, "--factor", 4, "--out", mask_path)
        code = run_cli("synth", "--n", 1, "--shape", "32x32", "--mask", mask_path,
                       "--out", tmp_path / "d")
        assert code == 2

    def test_regeneration_is_bit_identical(self, tmp_path):
        mask_path = tmp_path / "m.txt"
        run_cli("mask", "--lines", 32, "--factor", 4, "--out", mask_path)
        for sub in ("a", "b"):
            assert run_cli("synth", "--n", 4, "--shape", "32x32", "--mask", mask_path,
                           "--out", tmp_path / sub, "--seed", 9) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


class TestTrainCommand:
    def test_history_has_one_row_per_executed_epoch(self, toy_run):
        history = (toy_run["run"] / "history.csv").read_text().strip().splitlines()
        last = json.loads((toy_run["run"] / "last.json").read_text())
        executed = last["epoch"] + 1
        assert len(history) == 1 + executed  # header + executed epochs
        assert executed <= 40

    def test_outputs_present(self, toy_run):
        for name in ("history.csv", "best.json", "best.bin", "last.json",
                     "last.bin", "run_manifest.json"):
            assert (toy_run["run"] / name).exists(), name

    def test_unimodal_trains(self, toy_run, tmp_path):
        out = tmp_path / "uni"
        assert run_cli("train", "--data", toy_run["data"], "--model", "unimodal",
                       "--config", toy_run["config"], "--out", out, "--seed", 5) == 0
        manifest = json.loads((out / "best.json").read_text())
        assert manifest["config"]["multimodal"] is False

    def test_resume_continues_epoch_numbering(self, toy_run, tmp_path):
        out = tmp_path / "resume"
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"train": {"epochs": 2, "batch_size": 4},
             "model": {"depth": 2, "base_width": 4, "num_layers": 1}}))
        assert run_cli("train", "--data", toy_run["data"], "--config", cfg_path,
                       "--out", out, "--seed", 5) == 0
        cfg_path.write_text(json.dumps(
            {"train": {"epochs": 4, "batch_size": 4},
             "model": {"depth": 2, "base_width": 4, "num_layers": 1}}))
        code = run_cli("train", "--data", toy_run["data"], "--config", cfg_path,
                       "--out", out, "--seed", 5, "--resume")
        assert code == 2  # changed config must be rejected

        cfg_path.write_text(json.dumps(
            {"train": {"epochs": 2, "batch_size": 4},
             "model": {"depth": 2, "base_width": 4, "num_layers": 1}}))
        best_before = (out / "best.bin").read_bytes()
        assert run_cli("train", "--data", toy_run["data"], "--config", cfg_path,
                       "--out", out, "--seed", 5, "--resume") == 0
        from ksrecon.training import read_history_csv
        rows = read_history_csv(out / "history.csv")
        assert [r["epoch"] for r in rows] == [0, 1]  # budget already exhausted
        # an epoch-less resume must not clobber the best checkpoint
        assert (out / "best.bin").read_bytes() == best_before

    def test_unknown_config_key_exits_2(self, toy_run, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"velocity": 9}}))
        code = run_cli("train", "--data", toy_run["data"], "--config", bad,
                       "--out", tmp_path / "o", "--seed", 5)
        assert code == 2


class TestEvalCommand:
    def test_eval_outputs_and_aggregates(self, toy_run, tmp_path):
        out = tmp_path / "eval"
        assert run_cli("eval", "--data", toy_run["data"], "--checkpoint",
                       toy_run["run"], "--out", out) == 0
        records = [json.loads(line) for line in
                   (out / "metrics.jsonl").read_text().strip().splitlines()]
        assert len(records) == 10
        for rec in records:
            assert {"id", "mse", "ssim", "dssim", "psnr", "ssim_win"} == set(rec)
            assert abs(rec["dssim"] - (1.0 - rec["ssim"]) / 2.0) < 1e-12
        summary = json.loads((out / "summary.json").read_text())
        mean = float(np.mean([r["ssim"] for r in records]))
        assert abs(summary["model"]["mean_ssim"] - mean) < 1e-12
        pngs = os.listdir(out / "png")
        assert len(pngs) == 10

    def test_trained_model_beats_zero_filled(self, toy_run, tmp_path):
        # evaluated against its own training targets (structural check)
        out = tmp_path / "eval2"
        run_cli("eval", "--data", toy_run["data"], "--checkpoint", toy_run["run"],
                "--out", out)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["model"]["mean_ssim"] > summary["zero_filled"]["mean_ssim"]


class TestReconCommand:
    def test_bit_identical_reruns(self, toy_run, tmp_path):
        data = toy_run["data"]
        rec = json.loads((data / "manifest.jsonl").read_text().splitlines()[0])
        t2_path = data / rec["paths"]["t2"]
        flair_path = data / rec["paths"]["flair"]
        outs = []
        for name in ("r1.raw", "r2.raw"):
            out = tmp_path / name
            assert run_cli("recon", "--t2", t2_path, "--flair", flair_path,
                           "--mask", toy_run["mask"], "--checkpoint", toy_run["run"],
                           "--out", out) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        img = load_image(tmp_path / "r1.raw")
        assert img.shape == (32, 32)
        assert np.all((img > 0.0) & (img < 1.0))

    def test_missing_flair_for_multimodal_exits_2(self, toy_run, tmp_path):
        data = toy_run["data"]
        rec = json.loads((data / "manifest.jsonl").read_text().splitlines()[0])
        code = run_cli("recon", "--t2", data / rec["paths"]["t2"],
                       "--mask", toy_run["mask"], "--checkpoint", toy_run["run"],
                       "--out", tmp_path / "r.raw")
        assert code == 2


class TestPlotCommand:
    def test_svg_emitted(self, toy_run, tmp_path):
        out = tmp_path / "loss.svg"
        assert run_cli("plot", "--history", toy_run["run"] / "history.csv",
                       "--out", out) == 0
        text = out.read_text()
        assert text.startswith("<svg") and "polyline" in text
        assert "train_loss" in text and "val_loss" in text

    def test_missing_history_exits_2(self, tmp_path):
        assert run_cli("plot", "--history", tmp_path / "none.csv",
                       "--out", tmp_path / "o.svg") == 2


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        out = tmp_path / "m.txt"
        proc = subprocess.run(
            [sys.executable, "-m", "ksrecon.cli", "mask", "--lines", "292",
             "--factor", "4", "--kind", "center", "--out", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "73 of 292" in proc.stdout

    def test_validation_error_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "ksrecon.cli", "mask", "--lines", "3",
             "--factor", "4", "--out", "/tmp/should-not-exist-mask.txt"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2


class TestReplay:
    def test_manifest_replay_reproduces_pipeline(self, tmp_path):
        """Re-running the recorded commands reproduces every artifact."""
        mask_path = tmp_path / "mask.txt"
        run_cli("mask", "--lines", 32, "--factor", 4, "--out", mask_path)

        first = tmp_path / "first"
        second = tmp_path / "second"
        for root in (first, second):
            os.makedirs(root)
            data = root / "data"
            run = root / "run"
            ev = root / "eval"
            cfg = tmp_path / "cfg.json"
            cfg.write_text(json.dumps(
                {"train": {"epochs": 1, "batch_size": 4},
                 "model": {"depth": 2, "base_width": 4, "num_layers": 1}}))
            assert run_cli("synth", "--n", 6, "--shape", "32x32", "--mask", mask_path,
                           "--out", data, "--seed", 21) == 0
            assert run_cli("train", "--data", data, "--config", cfg,
                           "--out", run, "--seed", 21) == 0
            assert run_cli("eval", "--data", data, "--checkpoint", run,
                           "--out", ev, "--seed", 21) == 0
        assert tree_digest(first) == tree_digest(second)

    def test_manifest_records_resolved_config(self, toy_run):
        manifest = json.loads((toy_run["run"] / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["train"]["epochs"] == 40
        assert manifest["config"]["model"]["base_width"] == 4
        assert manifest["seed"] == 5
        assert manifest["version"]
