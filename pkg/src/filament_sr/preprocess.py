"""Raw-image conditioning and training-set construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError, ShapeError
from .imgcore import Depth, Image2D, ImageStack, load_image, normalize_unit, save_image, split_tiles

log = logging.getLogger(__name__)

DEFAULT_UPSAMPLE_SIGMA = 0.7
DEFAULT_W0 = 10.0
DEFAULT_SIGMA_W = 5.0


def threshold_denoise(img: Image2D, k: float | str = 2.0) -> Image2D:
    """Zero every pixel below ``mean_b + k * std_b`` of the darkest half of the image."""
    if k == "auto":
        k = 2.0
    v = img.values
    dark = np.sort(v, axis=None)[: max(1, v.size // 2)]
    t = dark.mean() + k * dark.std()
    return img.with_values(np.where(v < t, 0.0, v))


def _upsample_matrix(n: int, sigma: float) -> np.ndarray:
    # output sample y sits at input coordinate y/2; distances measured in output pixels
    y = np.arange(2 * n)[:, None]
    d = y - 2 * np.arange(n)[None, :]
    w = np.where(np.abs(d) <= 3 * sigma, np.exp(-(d**2) / (2 * sigma**2)), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def gaussian_upsample_x2(img: Image2D, sigma_px: float = DEFAULT_UPSAMPLE_SIGMA) -> Image2D:
    """Double both sides by normalized Gaussian-weighted resampling.

    ``sigma_px`` is in output pixels; the window is the square of half-width
    ``3 sigma``, which keeps the kernel separable.
    """
    if not sigma_px > 0:
        raise ParameterError("sigma_px must be positive")
    rows = _upsample_matrix(img.height, sigma_px)
    cols = _upsample_matrix(img.width, sigma_px)
    return img.with_values(rows @ img.values @ cols.T, pixel_pitch_nm=img.pixel_pitch_nm / 2)


def _z_smoothing_matrix(n: int, sigma: float) -> np.ndarray:
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    w = np.where(np.abs(d) <= 3 * sigma, np.exp(-(d**2) / (2 * sigma**2)), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def gaussian_upsample_stack(stack: ImageStack, sigma_px: float = DEFAULT_UPSAMPLE_SIGMA) -> ImageStack:
    """Upsample every slice in x and y, then apply the same Gaussian along z.

    The number of slices is unchanged; along z ``sigma_px`` is measured in
    slices and the weights are renormalized at the ends of the stack.
    """
    planes = np.stack([gaussian_upsample_x2(s, sigma_px).values for s in stack.slices])
    mixed = np.tensordot(_z_smoothing_matrix(len(planes), sigma_px), planes, axes=1)
    first = stack.slices[0]
    slices = [first.with_values(v, pixel_pitch_nm=first.pixel_pitch_nm / 2) for v in mixed]
    return ImageStack(slices, stack.z_step_nm)


def compute_weight_map(label: Image2D, w0: float = DEFAULT_W0, sigma_w: float = DEFAULT_SIGMA_W) -> np.ndarray:
    """Per-pixel loss weights: class balancing plus a bonus near close structures.

    ``w = N / (2 N_class) + w0 exp(-(d1 + d2)^2 / (2 sigma_w^2))`` where d1, d2
    are the distances to the nearest and second-nearest 8-connected
    foreground components (d2 = d1 when there is only one component).
    """
    g = label.values
    if not np.all((g == 0) | (g == 1)):
        raise ParameterError("weight map needs a binary label")
    fg = g == 1
    n = g.size
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == n:
        log.info("weight map: label has a single class; class count floored at 1")
    w_fg = n / (2 * max(n_fg, 1))
    w_bg = n / (2 * max(n - n_fg, 1))
    weights = np.where(fg, w_fg, w_bg)

    comps, k = ndimage.label(fg, structure=np.ones((3, 3)))
    if k == 0:
        return weights
    d1 = np.full(g.shape, np.inf)
    d2 = np.full(g.shape, np.inf)
    for c in range(1, k + 1):
        d = ndimage.distance_transform_edt(comps != c)
        d2 = np.where(d < d1, d1, np.minimum(d2, d))
        d1 = np.minimum(d1, d)
    if k == 1:
        d2 = d1
    return weights + w0 * np.exp(-((d1 + d2) ** 2) / (2 * sigma_w**2))


# ------------------------------------------------------------------- dataset


@dataclass(eq=False)
class DatasetPair:
    original: Image2D
    label: Image2D
    weight: np.ndarray

    def __post_init__(self):
        if not (self.original.shape == self.label.shape == self.weight.shape):
            raise ShapeError(
                f"pair shapes differ: {self.original.shape}, {self.label.shape}, {self.weight.shape}"
            )
        if not np.all((self.label.values == 0) | (self.label.values == 1)):
            raise ParameterError("label tile is not binary")
        if not (np.all(np.isfinite(self.weight)) and np.all(self.weight > 0)):
            raise ParameterError("weights must be positive and finite")


@dataclass
class DatasetManifest:
    pairs: list[tuple[str, str, str]]
    tile_size: int
    split: str = "train"
    root: Path = Path(".")
    n_images: int = 0

    @property
    def counts(self) -> dict:
        return {"images": self.n_images, "pairs": len(self.pairs)}

    def to_json(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "split": self.split,
            "counts": self.counts,
            "pairs": [{"original": o, "label": lab, "weight": w} for o, lab, w in self.pairs],
        }

    def load_pair(self, i: int) -> DatasetPair:
        o, lab, w = (self.root / p for p in self.pairs[i])
        original = load_image(o)
        label = load_image(lab, pixel_pitch_nm=original.pixel_pitch_nm)
        weight = load_image(w).values
        return DatasetPair(original, label.with_values(label.values), weight)

    def __len__(self):
        return len(self.pairs)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(), indent=2))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        pairs = [(p["original"], p["label"], p["weight"]) for p in doc["pairs"]]
        return DatasetManifest(
            pairs, int(doc["tile_size"]), doc.get("split", "train"), path.parent, doc.get("counts", {}).get("images", 0)
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad dataset manifest ({exc})") from exc


def build_dataset(
    originals,
    labels,
    tile_size: int,
    out_dir,
    split: str = "train",
    w0: float = DEFAULT_W0,
    sigma_w: float = DEFAULT_SIGMA_W,
) -> DatasetManifest:
    """Tile (original, label) pairs, attach weight maps and write everything to ``out_dir``.

    Originals are scaled to [0, 1] per image before tiling. All-background
    tiles are kept.
    """
    if len(originals) != len(labels):
        raise ShapeError(f"{len(originals)} originals but {len(labels)} labels")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (orig, lab) in enumerate(zip(originals, labels)):
        if orig.shape != lab.shape:
            raise ShapeError(f"pair {i}: original {orig.shape} vs label {lab.shape}")
        o_tiles, _ = split_tiles(normalize_unit(orig), tile_size)
        l_tiles, _ = split_tiles(lab, tile_size)
        for t, (ot, lt) in enumerate(zip(o_tiles, l_tiles)):
            stem = f"{split}_{i:04d}_{t:03d}"
            weight = compute_weight_map(lt, w0, sigma_w)
            DatasetPair(ot, lt, weight)
            o_path = save_image(ot, out_dir / f"{stem}_orig.f32", Depth.F32)
            l_path = save_image(lt, out_dir / f"{stem}_label.pgm", Depth.U8)
            w_path = save_image(ot.with_values(weight), out_dir / f"{stem}_weight.f32", Depth.F32)
            entries.append(tuple(p.name for p in (o_path, l_path, w_path)))
    manifest = DatasetManifest(entries, int(tile_size), split, out_dir, len(originals))
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
