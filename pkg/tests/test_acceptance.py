"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from gradcheck import relative_errors, summary

from filament_sr.anet import layers as L
from filament_sr.anet.model import AnetConfig, AnetModel, model_gradients, weighted_ce_loss
from filament_sr.cli import run
from filament_sr.dwdc import LrSpec, WaveletSpec, dwt2_forward, dwt2_inverse, iterate_lucy_richardson, poisson_loglik
from filament_sr.imgcore import Depth, Image2D, assemble_tiles, split_tiles
from filament_sr.postmetrics import LineProfile, fwhm, postprocess_result, psnr, ssim
from filament_sr.synthlab import Psf, PhantomSpec, convolve2d, gaussian_psf, generate_phantom

FWHM_PER_SIGMA = 2.3548


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ------------------------------------------------------------------ 1


def _layer_errors(rng):
    errs = []

    def check(forward, backward, arrays):
        out, cache = forward()
        r = rng.normal(size=out.shape)
        grads = dict(zip(arrays, backward(r, cache)))
        errs.append(relative_errors(lambda: float(np.sum(forward()[0] * r)), arrays, grads))

    x, w, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    check(lambda: L.conv2d_same_forward(x, w, b), L.conv2d_same_backward, {"x": x, "w": w, "b": b})
    x1, w1, b1 = rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(2, 4, 1, 1)), rng.normal(size=2)
    check(lambda: L.conv2d_same_forward(x1, w1, b1), L.conv2d_same_backward, {"x": x1, "w": w1, "b": b1})
    xb, g, be = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3)
    check(lambda: L.batchnorm_forward(xb, g, be, np.zeros(3), np.ones(3), True, update=False),
          L.batchnorm_backward, {"x": xb, "gamma": g, "beta": be})
    xr = rng.normal(size=(1, 2, 4, 4))
    xr[np.abs(xr) < 1e-3] = 0.5
    check(lambda: L.relu_forward(xr), lambda d, m: (L.relu_backward(d, m),), {"x": xr})
    xp = rng.permutation(2 * 64).reshape(1, 2, 8, 8) / 10.0
    check(lambda: L.maxpool2_forward(xp), lambda d, c: (L.maxpool2_backward(d, c),), {"x": xp})
    xt, wt, bt = rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)
    check(lambda: L.tconv2_forward(xt, wt, bt), L.tconv2_backward, {"x": xt, "w": wt, "b": bt})
    e, d = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    check(lambda: (L.concat_skip(e, d), None), lambda r, _: L.split_skip(r, 2), {"e": e, "d": d})

    # soft-max + weighted cross-entropy head
    s = rng.normal(size=(1, 2, 4, 4))
    truth, wt_map = rng.integers(0, 2, (1, 4, 4)), rng.uniform(0.5, 2, (1, 4, 4))
    p = L.softmax_pixelwise(s)
    onehot = np.stack([truth == 0, truth == 1], axis=1)
    ds = (p - onehot) * (wt_map / wt_map.sum())[:, None]
    errs.append(relative_errors(lambda: weighted_ce_loss(L.softmax_pixelwise(s), truth, wt_map).value, {"s": s}, {"s": ds}))
    return np.concatenate(errs)


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    layer = _layer_errors(rng)
    model = AnetModel.initialize(AnetConfig(2, 2), rng)
    for k in model.params:
        if not k.endswith(".w"):
            model.params[k] = model.params[k] + rng.normal(0, 0.3, model.params[k].shape)
    x = rng.normal(size=(1, 1, 8, 8))
    g, w = rng.integers(0, 2, (1, 8, 8)), rng.uniform(0.5, 2, (1, 8, 8))
    bundle = model_gradients(model, x, g, w)
    full = relative_errors(lambda: model_gradients(model, x, g, w).value, model.params, bundle.grads)
    elapsed = time.perf_counter() - t0
    lf, lw = summary(layer)
    ff, fw = summary(full)
    ok = min(lf, ff) >= 0.99 and max(lw, fw) <= 1e-3 and elapsed <= 120
    verdict(1, ok, f"layers {lf:.2%} <=1e-4 (worst {lw:.1e}); model {full.size} params {ff:.2%} "
                   f"(worst {fw:.1e}); {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def test_criterion_02_softmax():
    rng = np.random.default_rng(2)
    worst_sum = worst_shift = 0.0
    for k in (2, 3, 5):
        s = rng.normal(0, 10, size=(10_000, k, 1, 1))
        p = L.softmax_pixelwise(s)
        shift = rng.normal(0, 100, size=(10_000, 1, 1, 1))
        worst_sum = max(worst_sum, np.max(np.abs(p.sum(axis=1) - 1)))
        worst_shift = max(worst_shift, np.max(np.abs(L.softmax_pixelwise(s + shift) - p)))
    ok = worst_sum <= 1e-12 and worst_shift <= 1e-12
    verdict(2, ok, f"sum error {worst_sum:.1e}, shift error {worst_shift:.1e} over 3x10^4 vectors")


# ------------------------------------------------------------------ 3


def test_criterion_03_dwt_roundtrip():
    rng = np.random.default_rng(3)
    worst = 0.0
    for family in ("haar", "db4"):
        spec = WaveletSpec(family, 2)
        for _ in range(100):
            h, w = rng.integers(8, 97, size=2)
            img = Image2D(rng.random((h, w)) * rng.uniform(1, 1000))
            back = dwt2_inverse(dwt2_forward(img, spec), spec)
            worst = max(worst, float(np.max(np.abs(back.values - img.values))))
    verdict(3, worst <= 1e-10, f"max roundtrip error {worst:.1e} over 2x100 images")


# ------------------------------------------------------------------ 4


def test_criterion_04_lucy_richardson():
    psf = gaussian_psf(2.0)
    worst_drop, min_value, n_iter = 0.0, np.inf, 0
    for seed in range(5):
        truth = generate_phantom(PhantomSpec(48, 48, 3, 1.5, 1.0, seed=seed))
        d = convolve2d(truth, psf)
        prev = poisson_loglik(d.values, d, psf)
        for u in iterate_lucy_richardson(d, LrSpec(psf, 50)):
            cur = poisson_loglik(d.values, u, psf)
            worst_drop = max(worst_drop, prev - cur)
            min_value = min(min_value, float(u.values.min()))
            prev = cur
            n_iter += 1
    d = Image2D(np.random.default_rng(4).random((20, 20)))
    delta_exact = all(np.array_equal(u.values, d.values)
                      for u in iterate_lucy_richardson(d, LrSpec(Psf(np.pad([[1.0]], 1)), 50)))
    ok = worst_drop <= 1e-9 and min_value >= 0 and delta_exact and n_iter == 250
    verdict(4, ok, f"largest log-likelihood drop {worst_drop:.1e}, min value {min_value:.2e}, "
                   f"delta fixed point {'exact' if delta_exact else 'BROKEN'}")


# ------------------------------------------------------------------ 5


def test_criterion_05_fwhm():
    errs = []
    for sigma in (2, 5, 10, 20):
        x = np.arange(-8 * sigma, 8 * sigma + 1, dtype=float)
        prof = LineProfile((x + 500) * 62.5, np.exp(-((x - 0.37) ** 2) / (2 * sigma**2)))
        errs.append(abs(fwhm(prof) / 62.5 / (FWHM_PER_SIGMA * sigma) - 1))
    verdict(5, max(errs) <= 0.02, "relative errors " + ", ".join(f"{e:.2%}" for e in errs))


# ------------------------------------------------------------------ 6


def test_criterion_06_psnr_ssim():
    a = Image2D(np.random.default_rng(6).integers(0, 200, (32, 32)).astype(float), source_depth=Depth.U8)
    b = a.with_values(a.values + 16)
    p = psnr(a, b)
    s_id = ssim(a, a)
    sentinel = psnr(a, a) == math.inf and psnr(a, b) != math.inf
    ok = abs(p - 24.048) <= 1e-3 and abs(s_id - 1) <= 1e-9 and sentinel
    verdict(6, ok, f"offset-16 PSNR {p:.4f} dB, SSIM(a,a) {s_id:.12f}, sentinel {'ok' if sentinel else 'BROKEN'}")


# ------------------------------------------------------------------ 7 and 9


@pytest.fixture(scope="module")
def reproduce_runs(tmp_path_factory):
    runs = []
    for name in ("first", "second"):
        out = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        code = run(["reproduce", "--seed", "7", "--out", str(out)])
        runs.append((code, out, time.perf_counter() - t0))
    return runs


def test_criterion_07_resolution_gain(reproduce_runs):
    code, out, elapsed = reproduce_runs[0]
    assert code == 0
    r = json.loads((out / "report.json").read_text())
    cfg = r["config"]
    setup = (
        cfg["dataset"]["n_train"] + cfg["dataset"]["n_test"] == 80
        and cfg["dataset"]["n_test"] == 16
        and (cfg["phantom"]["width"], cfg["phantom"]["height"]) == (64, 64)
        and cfg["degrade"]["psf_sigma"] == 2.0
        and cfg["degrade"]["noise_fraction"] == 0.05
        and (cfg["train"]["depth"], cfg["train"]["base"]) == (3, 8)
        and cfg["train"]["epochs"] <= 200
    )
    ratio, frac = r["fwhm_ratio"], r["measurable_fraction"]
    ok = setup and ratio is not None and ratio <= 1 / 3 and frac >= 0.9 and elapsed <= 30 * 60
    verdict(7, ok, f"median FWHM {r['median_fwhm_result_nm']} nm vs {r['median_fwhm_degraded_nm']:.1f} nm "
                   f"(ratio {ratio if ratio is None else round(ratio, 3)}), measurable "
                   f"{r['measured_result']}/{r['held_out_filaments']} = {frac:.1%}, {elapsed:.0f}s")


def test_criterion_09_determinism(reproduce_runs):
    (c1, a, _), (c2, b, _) = reproduce_runs
    assert c1 == c2 == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    same_tree = files_a == files_b
    differing = [str(f) for f in files_a if same_tree and (a / f).read_bytes() != (b / f).read_bytes()]
    key = ["checkpoints/final.json", "checkpoints/final.bin", "train_log.csv", "report.json"]
    present = all((a / k).is_file() for k in key)
    ok = same_tree and not differing and present
    verdict(9, ok, f"{len(files_a)} files compared byte for byte, {len(differing)} differ")


# ------------------------------------------------------------------ 8


def test_criterion_08_tiling():
    rng = np.random.default_rng(8)
    identical = 0
    for _ in range(50):
        t = int(rng.integers(8, 65))
        h, w = (int(v) for v in rng.integers(t, 4 * t + 1, size=2))
        img = Image2D(rng.random((h, w)))
        tiles, grid = split_tiles(img, t)
        identical += np.array_equal(assemble_tiles(tiles, grid, w, h).values, img.values)
    tiles, _ = split_tiles(Image2D(np.zeros((2048, 2048))), 512)
    ok = identical == 50 and len(tiles) == 16
    verdict(8, ok, f"{identical}/50 bit-identical roundtrips, 2048/512 gives {len(tiles)} tiles")


# ------------------------------------------------------------------ 10


def test_criterion_10_postprocess_support():
    rng = np.random.default_rng(10)
    exact = 0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(4, 65, size=2))
        pred = Image2D(rng.random(shape))
        test = Image2D(rng.uniform(0.01, 255, shape))
        thr = float(rng.uniform(0.1, 0.9))
        res = postprocess_result(pred, test, thr).values
        mask = pred.values > thr
        exact += np.array_equal(res != 0, mask) and np.array_equal(res[mask], test.values[mask])
    verdict(10, exact == 20, f"{exact}/20 pairs with result support equal to mask support")
