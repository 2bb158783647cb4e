import csv
import json

import numpy as np
import pytest

from filament_sr.anet.model import AnetConfig, AnetModel
from filament_sr.anet.training import load_checkpoint, save_checkpoint
from filament_sr.cli import run, validate_config
from filament_sr.imgcore import Depth, Image2D, load_image, save_image
from filament_sr.pipeline import default_config
from filament_sr.postmetrics import reload_stack
from filament_sr.preprocess import load_manifest
from filament_sr.workers import parallel_map, resolve_workers


class TestValidate:
    def test_default_is_clean(self):
        assert validate_config(default_config()) == []

    def test_zero_tile(self):
        cfg = default_config()
        cfg["dataset"]["tile_size"] = 0
        problems = validate_config(cfg)
        assert len(problems) == 1 and "dataset.tile_size" in problems[0]

    def test_divisibility_sweep(self):
        for depth in range(1, 6):
            for tile in range(8, 129):
                cfg = default_config()
                cfg["phantom"]["width"] = cfg["phantom"]["height"] = 128
                cfg["train"]["depth"], cfg["dataset"]["tile_size"] = depth, tile
                problems = validate_config(cfg)
                if tile % 2**depth:
                    assert len(problems) == 1
                    assert "train.depth" in problems[0] and "dataset.tile_size" in problems[0]
                else:
                    assert problems == []

    def test_unknown_and_wrong_type(self):
        cfg = default_config()
        cfg["train"]["momentum"] = 0.9
        cfg["train"]["epochs"] = "many"
        problems = validate_config(cfg)
        assert any("train.momentum" in p for p in problems)
        assert any("train.epochs" in p for p in problems)


class TestExitCodes:
    def test_no_arguments(self, capsys):
        assert run([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run(["profile", "--bogus"]) == 2

    def test_bad_override_is_usage_error(self, tmp_path, capsys):
        assert run(["reproduce", "--out", str(tmp_path), "--set", "dataset.tile_size=0"]) == 2
        assert "dataset.tile_size" in capsys.readouterr().err

    def test_missing_file_is_module_error(self, tmp_path, capsys):
        assert run(["profile", "--in", str(tmp_path / "nope.pgm"), "--row", "0", "--out", str(tmp_path / "p.csv")]) == 1
        assert "error" in capsys.readouterr().err

    def test_out_of_range_row(self, tmp_path):
        p = save_image(Image2D(np.zeros((4, 4))), tmp_path / "z.pgm", Depth.U8)
        assert run(["profile", "--in", str(p), "--row", "9", "--out", str(tmp_path / "p.csv")]) == 1


class TestWorkers:
    def test_env_overrides(self, monkeypatch):
        monkeypatch.setenv("FILAMENT_SR_WORKERS", "3")
        assert resolve_workers(1) == 3
        monkeypatch.setenv("FILAMENT_SR_WORKERS", "0")
        with pytest.raises(ValueError):
            resolve_workers(1)
        monkeypatch.delenv("FILAMENT_SR_WORKERS")
        assert resolve_workers(2) == 2

    def test_ordered(self):
        assert parallel_map(lambda v: v * v, range(20), 4) == [v * v for v in range(20)]


def test_stage_by_stage(tmp_path):
    """Every artifact written by one stage loads in the next."""
    d = tmp_path
    cfg = default_config()
    cfg["phantom"].update(width=32, height=32)
    (d / "cfg.json").write_text(json.dumps(cfg))

    assert run(["phantom", "--spec", str(d / "cfg.json"), "--out", str(d / "ph"), "--count", "2", "--seed", "3"]) == 0
    phantoms = sorted((d / "ph").glob("*.f32"))
    assert len(phantoms) == 2 and load_image(phantoms[0]).shape == (32, 32)

    degraded = []
    for i, p in enumerate(phantoms):
        out = d / f"deg{i}.f32"
        assert run(["degrade", "--in", str(p), "--out", str(out), "--psf-sigma", "2", "--noise", "0.02", "--seed", str(i)]) == 0
        degraded.append(out)
    a, b = load_image(degraded[0]), load_image(degraded[0])
    np.testing.assert_array_equal(a.values, b.values)

    labels = []
    for i, p in enumerate(degraded):
        out = d / f"lab{i}.pgm"
        assert run(["label", "--in", str(p), "--out", str(out), "--wavelet", "haar", "--levels", "2", "--lr-iters", "20"]) == 0
        labels.append(out)
        assert set(np.unique(load_image(out).values)) <= {0.0, 1.0}

    assert run(["dataset", "--originals", *map(str, degraded), "--labels", *map(str, labels),
                "--tile", "16", "--out", str(d / "ds"), "--config", str(d / "cfg.json")]) == 0
    man = load_manifest(d / "ds" / "manifest.json")
    assert len(man) == 8

    assert run(["train", "--manifest", str(d / "ds" / "manifest.json"), "--out", str(d / "model"), "--depth", "2",
                "--base", "2", "--epochs", "2", "--lr", "1e-3", "--seed", "1", "--config", str(d / "cfg.json")]) == 0
    model = load_checkpoint(d / "model.json")
    assert model.config.depth == 2
    rows = list(csv.reader((d / "model.csv").open()))
    assert rows[0] == ["epoch", "step", "loss", "clamped_pixels"] and len(rows) == 1 + 2 * 8

    assert run(["predict", "--model", str(d / "model.json"), "--in", str(degraded[0]), "--out", str(d / "res.f32"),
                "--threshold", "0.5", "--tile", "16", "--prob-out", str(d / "prob.f32")]) == 0
    res, prob = load_image(d / "res.f32"), load_image(d / "prob.f32")
    assert res.shape == prob.shape == (32, 32)
    assert np.all((res.values == 0) | (prob.values > 0.5))

    assert run(["eval", "--a", str(phantoms[0]), "--b", str(phantoms[0]), "--report", str(d / "q.json"), "--max-val", "1"]) == 0
    report = json.loads((d / "q.json").read_text())
    assert report["psnr_db"] == "inf" and report["ssim"] == pytest.approx(1.0)

    assert run(["profile", "--in", str(degraded[0]), "--row", "16", "--out", str(d / "p.csv")]) == 0
    assert (d / "p.csv").read_text().startswith("position_nm,intensity")

    assert run(["stack", "--slices", *map(str, degraded), "--zstep", "150", "--out", str(d / "st"),
                "--mip", str(d / "mip.f32")]) == 0
    stack = reload_stack(d / "st" / "stack.json")
    assert len(stack.slices) == 2 and stack.z_step_nm == 150
    assert np.all(load_image(d / "mip.f32").values >= load_image(degraded[1]).values)


def test_predict_2048_in_16_tiles(tmp_path):
    model = AnetModel.initialize(AnetConfig(4, 1), np.random.default_rng(0))
    save_checkpoint(model, tmp_path / "m")
    img = Image2D(np.random.default_rng(1).random((2048, 2048)), pixel_pitch_nm=62.5)
    save_image(img, tmp_path / "big.f32", Depth.F32)
    code = run(["predict", "--model", str(tmp_path / "m.json"), "--in", str(tmp_path / "big.f32"),
                "--out", str(tmp_path / "res.f32"), "--tile", "512", "--prob-out", str(tmp_path / "prob.f32")])
    assert code == 0
    res = load_image(tmp_path / "res.f32")
    assert res.shape == (2048, 2048) and res.pixel_pitch_nm == 62.5
