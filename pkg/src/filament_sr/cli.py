"""Command-line entry point: one subcommand per pipeline stage plus ``reproduce``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .anet.model import AnetConfig
from .anet.training import load_checkpoint, predict_image, save_checkpoint, train
from .dwdc import LrSpec, Wavelet, WaveletSpec, make_label
from .errors import FilamentSRError
from .imgcore import Depth, Image2D, load_image, normalize_unit, save_image
from .pipeline import default_config, reproduce
from .postmetrics import (
    QualityReport,
    default_max_val,
    fwhm,
    line_profile,
    max_intensity_projection,
    postprocess_result,
    psnr,
    ssim,
    stack_result,
)
from .preprocess import build_dataset, load_manifest
from .synthlab import Boundary, DegradationSpec, NoiseKind, PhantomSpec, degrade, gaussian_psf, generate_phantom
from .workers import resolve_workers

log = logging.getLogger("filament_sr")

# --------------------------------------------------------------------- config


def _is_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


# key -> (check, message); checks see the value only
_RULES = {
    "seed": (lambda v: _is_int(v) and v >= 0, "must be a non-negative integer"),
    "deterministic": (lambda v: isinstance(v, bool), "must be true or false"),
    "workers": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "phantom.width": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "phantom.height": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "phantom.n_filaments": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "phantom.thickness_px": (lambda v: _is_num(v) and v >= 0.5, "must be >= 0.5"),
    "phantom.intensity": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "phantom.curvature": (lambda v: _is_num(v) and v >= 0, "must be non-negative"),
    "phantom.pixel_pitch_nm": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "degrade.psf_sigma": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "degrade.noise": (lambda v: v in [k.value for k in NoiseKind], "must be gaussian, poisson or none"),
    "degrade.noise_fraction": (lambda v: _is_num(v) and v >= 0, "must be non-negative"),
    "degrade.boundary": (lambda v: v in [b.value for b in Boundary], "must be reflect or zero"),
    "dwdc.wavelet": (lambda v: v in [w.value for w in Wavelet], "must be haar or db4"),
    "dwdc.levels": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "dwdc.threshold_mode": (lambda v: v in ("soft", "hard"), "must be soft or hard"),
    "dwdc.lr_iters": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "dwdc.lr_psf_sigma": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "dataset.tile_size": (lambda v: _is_int(v) and v >= 8, "must be an integer >= 8"),
    "dataset.n_train": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "dataset.n_test": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "dataset.w0": (lambda v: _is_num(v) and v >= 0, "must be non-negative"),
    "dataset.sigma_w": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "train.depth": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "train.base": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "train.epochs": (lambda v: _is_int(v) and v >= 0, "must be a non-negative integer"),
    "train.lr": (lambda v: _is_num(v) and v > 0, "must be positive"),
    "predict.threshold": (lambda v: _is_num(v) and 0 <= v <= 1, "must lie in [0, 1]"),
    "eval.probe_margin": (lambda v: _is_int(v) and v >= 0, "must be a non-negative integer"),
    "eval.probe_clearance": (lambda v: _is_num(v) and v >= 0, "must be non-negative"),
    "eval.probe_half_width": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    "stack.z_step_nm": (lambda v: _is_num(v) and v > 0, "must be positive"),
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def validate_config(cfg: dict) -> list[str]:
    """Every violation found, each naming the offending dotted key(s)."""
    flat = _flatten(cfg)
    problems = [f"{k}: unknown key" for k in flat if k not in _RULES]
    for key, (ok, msg) in _RULES.items():
        if key not in flat:
            problems.append(f"{key}: missing")
        elif not ok(flat[key]):
            problems.append(f"{key}: {msg} (got {flat[key]!r})")
    if problems:
        return problems
    tile, depth = flat["dataset.tile_size"], flat["train.depth"]
    if tile % 2**depth:
        problems.append(f"train.depth / dataset.tile_size: 2**{depth} does not divide tile size {tile}")
    if flat["eval.probe_margin"] < flat["eval.probe_half_width"]:
        problems.append("eval.probe_margin: must be >= eval.probe_half_width")
    return problems


def load_config(path=None) -> dict:
    cfg = default_config()
    if path:
        user = json.loads(Path(path).read_text())
        _merge(cfg, user)
    return cfg


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def set_dotted(cfg: dict, key: str, value):
    node = cfg
    *parents, leaf = key.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ----------------------------------------------------------------- commands


class UsageError(Exception):
    pass


def _prepare(args, overrides: dict) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k, _parse_value(v))
    for key, value in overrides.items():
        if value is not None:
            set_dotted(cfg, key, value)
    problems = validate_config(cfg)
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    cfg["workers"] = resolve_workers(cfg["workers"])
    return cfg


def cmd_phantom(args):
    cfg = _prepare(args, {"seed": args.seed})
    pc = cfg["phantom"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = PhantomSpec(pc["width"], pc["height"], pc["n_filaments"], pc["thickness_px"],
                           pc["intensity"], pc["curvature"], cfg["seed"] + i)
        path = save_image(generate_phantom(spec, pc["pixel_pitch_nm"]), out / f"phantom_{i:04d}.f32", Depth.F32)
        print(path)


def cmd_degrade(args):
    cfg = _prepare(args, {"seed": args.seed, "degrade.psf_sigma": args.psf_sigma, "degrade.noise": args.noise_kind})
    dc = cfg["degrade"]
    img = load_image(args.input)
    spec = DegradationSpec(gaussian_psf(dc["psf_sigma"]), dc["noise"], args.noise, cfg["seed"], dc["boundary"])
    print(save_image(degrade(img, spec), args.out, Depth.F32))


def cmd_label(args):
    cfg = _prepare(args, {"dwdc.wavelet": args.wavelet, "dwdc.levels": args.levels, "dwdc.lr_iters": args.lr_iters,
                          "dwdc.lr_psf_sigma": args.lr_sigma})
    wc = cfg["dwdc"]
    label = make_label(load_image(args.input), WaveletSpec(wc["wavelet"], wc["levels"], wc["threshold_mode"]),
                       LrSpec(gaussian_psf(wc["lr_psf_sigma"]), wc["lr_iters"]))
    print(save_image(label, args.out, Depth.U8))


def cmd_dataset(args):
    cfg = _prepare(args, {"dataset.tile_size": args.tile})
    if len(args.originals) != len(args.labels):
        raise UsageError("--originals and --labels need the same number of files")
    ds = cfg["dataset"]
    originals = [load_image(p) for p in args.originals]
    labels = [load_image(p) for p in args.labels]
    man = build_dataset(originals, labels, ds["tile_size"], args.out, args.split, ds["w0"], ds["sigma_w"])
    print(f"{len(man)} pairs -> {Path(args.out) / 'manifest.json'}")


def cmd_train(args):
    cfg = _prepare(args, {"seed": args.seed, "train.depth": args.depth, "train.base": args.base,
                          "train.epochs": args.epochs, "train.lr": args.lr})
    tc = cfg["train"]
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, rows = train(manifest, AnetConfig(tc["depth"], tc["base"]), tc["epochs"], tc["lr"], cfg["seed"],
                        args.checkpoint_every, out.parent / "checkpoints" if args.checkpoint_every else None,
                        args.log or out.with_suffix(".csv"))
    print(save_checkpoint(model, out, epoch=tc["epochs"]))


def cmd_predict(args):
    cfg = _prepare(args, {"predict.threshold": args.threshold})
    model = load_checkpoint(args.model)
    img = load_image(args.input)
    tile = args.tile or min(img.height, img.width, cfg["dataset"]["tile_size"])
    prob = predict_image(model, img, tile, cfg["workers"])
    if args.prob_out:
        save_image(prob, args.prob_out, Depth.F32)
    result = postprocess_result(prob, normalize_unit(img), cfg["predict"]["threshold"])
    print(save_image(result, args.out, Depth.F32))


def cmd_eval(args):
    _prepare(args, {})
    a, b = load_image(args.a), load_image(args.b)
    peak = args.max_val if args.max_val is not None else default_max_val(a)
    notes = [f"max_val={peak:g}"]
    width = None
    if args.row is not None:
        width = fwhm(line_profile(b, args.row))
        notes.append(f"fwhm measured on --b row {args.row}")
    report = QualityReport(psnr(a, b, peak), ssim(a, b, peak), width, notes)
    Path(args.report).write_text(report.to_json())
    print(report.to_json())


def cmd_profile(args):
    _prepare(args, {})
    prof = line_profile(load_image(args.input), args.row, tuple(args.cols) if args.cols else None)
    print(prof.to_csv(args.out))


def cmd_stack(args):
    cfg = _prepare(args, {"stack.z_step_nm": args.zstep})
    slices = [load_image(p) for p in args.slices]
    stack, manifest = stack_result(slices, cfg["stack"]["z_step_nm"], args.out, args.depth)
    if args.mip:
        save_image(max_intensity_projection(stack), args.mip, Depth.F32)
    print(manifest)


def cmd_reproduce(args):
    cfg = _prepare(args, {"seed": args.seed, "train.epochs": args.epochs})
    report = reproduce(cfg, args.out)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2, sort_keys=True))


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are the desk-scale settings)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key by dotted path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="filament-sr", description="Filament super-resolution pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", parents=[common], help="render synthetic filament phantoms")
    p.add_argument("--spec", dest="config", help="phantom configuration JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("degrade", parents=[common], help="blur and add noise")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--psf-sigma", type=float)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian std or Poisson scale")
    p.add_argument("--noise-kind", choices=[k.value for k in NoiseKind])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("label", parents=[common], help="wavelet denoise, deconvolve and binarize")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wavelet", choices=[w.value for w in Wavelet])
    p.add_argument("--levels", type=int)
    p.add_argument("--lr-iters", type=int)
    p.add_argument("--lr-sigma", type=float)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("dataset", parents=[common], help="tile image pairs and attach weight maps")
    p.add_argument("--originals", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--tile", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train the network on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint stem")
    p.add_argument("--depth", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="tile, predict, assemble and postprocess")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--tile", type=int)
    p.add_argument("--prob-out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM (and optional FWHM) report")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--max-val", type=float)
    p.add_argument("--row", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", parents=[common], help="export a row profile as CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--cols", type=int, nargs=2, metavar=("START", "STOP"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("stack", parents=[common], help="write result slices as a z-stack")
    p.add_argument("--slices", nargs="+", required=True)
    p.add_argument("--zstep", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", choices=["F32", "U8", "U16"], default="F32")
    p.add_argument("--mip")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("reproduce", parents=[common], help="run the full synthetic experiment")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="reproduce_out")
    p.set_defaults(func=cmd_reproduce)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FilamentSRError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
