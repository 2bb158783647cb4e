"""End-to-end synthetic run: phantoms to trained network to FWHM comparison."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np

from .anet.model import AnetConfig
from .anet.training import predict_image, save_checkpoint, train
from .dwdc import LrSpec, WaveletSpec, make_label
from .errors import NoPeakError
from .imgcore import Image2D, normalize_unit
from .postmetrics import LineProfile, measure_fwhm, postprocess_result, psnr, ssim, stack_result
from .preprocess import build_dataset, threshold_denoise
from .synthlab import (
    DegradationSpec,
    PhantomSpec,
    bezier_point,
    bezier_points,
    bezier_tangent,
    convolve2d,
    degrade,
    gaussian_psf,
    render_filaments,
    sample_filaments,
)
from .workers import parallel_map

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 7,
    "deterministic": True,
    "workers": 1,
    "phantom": {
        "width": 64,
        "height": 64,
        "n_filaments": 2,
        "thickness_px": 1.0,
        "intensity": 1.0,
        "curvature": 0.15,
        "pixel_pitch_nm": 62.5,
    },
    "degrade": {"psf_sigma": 2.0, "noise": "gaussian", "noise_fraction": 0.05, "boundary": "reflect"},
    "dwdc": {
        "wavelet": "db4",
        "levels": 2,
        "threshold_mode": "soft",
        "lr_iters": 300,
        "lr_psf_sigma": 2.5,
    },
    "dataset": {"tile_size": 64, "n_train": 64, "n_test": 16, "w0": 10.0, "sigma_w": 5.0},
    "train": {"depth": 3, "base": 8, "epochs": 60, "lr": 1e-3},
    "predict": {"threshold": 0.2},
    "eval": {"probe_margin": 8, "probe_clearance": 8.0, "probe_half_width": 7},
    "stack": {"z_step_nm": 200.0},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


# ------------------------------------------------------------------- probes


def probe_sites(curves, width, height, margin=8, clearance=8.0):
    """One cross-section site per filament, or None where none qualifies.

    The site is the curve point closest to the middle of the curve that lies
    ``margin`` px inside the frame and ``clearance`` px from every other
    filament. The cut runs along whichever image axis is closer to the normal.
    """
    dense = [bezier_points(c, 0.25) for c in curves]
    sites = []
    for i, c in enumerate(curves):
        others = [p for j, p in enumerate(dense) if j != i]
        others = np.concatenate(others) if others else np.empty((0, 2))
        site = None
        for t in sorted(np.linspace(0.15, 0.85, 15), key=lambda t: abs(t - 0.5)):
            x, y = (int(round(v)) for v in bezier_point(c, t))
            if not (margin <= x < width - margin and margin <= y < height - margin):
                continue
            if len(others) and np.min(np.hypot(others[:, 0] - x, others[:, 1] - y)) < clearance:
                continue
            tx, ty = bezier_tangent(c, t)
            site = (x, y, abs(tx) > abs(ty))
            break
        sites.append(site)
    return sites


def cross_section(img: Image2D, site, half: int) -> LineProfile:
    x, y, along_column = site
    if along_column:
        values = img.values[y - half : y + half + 1, x]
    else:
        values = img.values[y, x - half : x + half + 1]
    return LineProfile(np.arange(values.size) * img.pixel_pitch_nm, values)


def site_fwhm(img: Image2D, site, half: int) -> float | None:
    try:
        return measure_fwhm(cross_section(img, site, half)).width_nm
    except NoPeakError:
        return None


# ----------------------------------------------------------------- reproduce


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _synthesize(cfg: dict, seed: int, n: int):
    """Phantoms, degraded copies, conditioned originals and DWDC labels."""
    pc, dc, wc = cfg["phantom"], cfg["degrade"], cfg["dwdc"]
    psf = gaussian_psf(dc["psf_sigma"])
    wspec = WaveletSpec(wc["wavelet"], wc["levels"], wc["threshold_mode"])
    lspec = LrSpec(gaussian_psf(wc["lr_psf_sigma"]), wc["lr_iters"])
    seeds = _seeds(seed, 2 * n)

    def one(i):
        spec = PhantomSpec(
            pc["width"], pc["height"], pc["n_filaments"], pc["thickness_px"], pc["intensity"], pc["curvature"], seeds[2 * i]
        )
        curves = sample_filaments(spec)
        truth = Image2D(
            render_filaments(curves, spec.width, spec.height, spec.thickness_px, spec.intensity),
            pixel_pitch_nm=pc["pixel_pitch_nm"],
        )
        # noise level is a fraction of the blurred peak so SNR does not depend on intensity
        sigma_n = dc["noise_fraction"] * convolve2d(truth, psf, dc["boundary"]).values.max()
        degraded = degrade(truth, DegradationSpec(psf, dc["noise"], sigma_n, seeds[2 * i + 1], dc["boundary"]))
        original = threshold_denoise(degraded)
        return {"curves": curves, "truth": truth, "degraded": degraded, "original": original,
                "label": make_label(original, wspec, lspec)}

    return parallel_map(one, range(n), cfg.get("workers", 1))


def reproduce(cfg: dict, out_dir) -> dict:
    """Run the whole synthetic experiment and write its artifacts to ``out_dir``.

    Writes the dataset, ``train_log.csv``, ``checkpoints/final.{json,bin}``,
    the held-out result images as a stack and ``report.json``. The report has
    no timings so identical seeds give identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, tc, ec = cfg["dataset"], cfg["train"], cfg["eval"]
    n_train, n_test = ds["n_train"], ds["n_test"]

    log.info("synthesizing %d phantom pairs", n_train + n_test)
    samples = _synthesize(cfg, cfg["seed"], n_train + n_test)
    train_set, test_set = samples[:n_train], samples[n_train:]

    manifest = build_dataset(
        [s["original"] for s in train_set], [s["label"] for s in train_set],
        ds["tile_size"], out / "dataset", "train", ds["w0"], ds["sigma_w"],
    )
    acfg = AnetConfig(tc["depth"], tc["base"])
    log.info("training depth-%d/base-%d for %d epochs", acfg.depth, acfg.base_channels, tc["epochs"])
    model, rows = train(manifest, acfg, tc["epochs"], tc["lr"], cfg["seed"], log_path=out / "train_log.csv")
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(model, out / "checkpoints" / "final", epoch=tc["epochs"])

    results = []
    degraded_w, result_w, label_w = [], [], []
    n_filaments = n_sites = 0
    psnrs, ssims = [], []
    for s in test_set:
        pred = predict_image(model, s["original"], ds["tile_size"], cfg.get("workers", 1))
        result = postprocess_result(pred, normalize_unit(s["original"]), cfg["predict"]["threshold"])
        results.append(result)
        truth = s["truth"]
        psnrs.append(psnr(truth, result, max_val=1.0))
        ssims.append(ssim(truth, result, data_range=1.0))
        masked_label = s["label"].with_values(s["label"].values * s["degraded"].values)
        for site in probe_sites(s["curves"], truth.width, truth.height, ec["probe_margin"], ec["probe_clearance"]):
            n_filaments += 1
            if site is None:
                continue
            n_sites += 1
            half = ec["probe_half_width"]
            for store, img in ((degraded_w, s["degraded"]), (result_w, result), (label_w, masked_label)):
                w = site_fwhm(img, site, half)
                if w is not None:
                    store.append(w)
    stack_result(results, cfg["stack"]["z_step_nm"], out / "results")

    med_d = float(np.median(degraded_w)) if degraded_w else None
    med_r = float(np.median(result_w)) if result_w else None
    med_l = float(np.median(label_w)) if label_w else None
    first = float(np.mean([r.loss for r in rows if r.epoch == 1])) if rows else None
    last = float(np.mean([r.loss for r in rows if r.epoch == tc["epochs"]])) if rows else None
    report = {
        "seed": cfg["seed"],
        "config": cfg,
        "held_out_filaments": n_filaments,
        "probe_sites": n_sites,
        "measured_degraded": len(degraded_w),
        "measured_result": len(result_w),
        "measurable_fraction": len(result_w) / n_filaments if n_filaments else 0.0,
        "median_fwhm_degraded_nm": med_d,
        "median_fwhm_result_nm": med_r,
        "median_fwhm_label_nm": med_l,
        "fwhm_ratio": med_r / med_d if med_r is not None and med_d else None,
        "mean_psnr_db_vs_truth": float(np.mean(psnrs)),
        "mean_ssim_vs_truth": float(np.mean(ssims)),
        "loss_first_epoch": first,
        "loss_last_epoch": last,
        "checkpoint": "checkpoints/final.json",
        "train_log": "train_log.csv",
        "results_stack": "results/stack.json",
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
