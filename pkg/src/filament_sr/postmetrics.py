"""Postprocessing, image-quality metrics, FWHM line profiles and stack export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dwdc import binarize
from .errors import NoPeakError, ParameterError, ShapeError
from .imgcore import Depth, Image2D, ImageStack, load_stack, save_image, save_stack_manifest


def _same_shape(a: Image2D, b: Image2D):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def postprocess_result(prediction: Image2D, test: Image2D, threshold: float = 0.5) -> Image2D:
    """Binarize the foreground probability and keep the test image under the mask."""
    _same_shape(prediction, test)
    mask = binarize(prediction, threshold).values
    return test.with_values(mask * test.values)


# ------------------------------------------------------------------ metrics


def default_max_val(img: Image2D) -> float:
    """Peak value implied by the image's provenance; float images need an explicit one."""
    if img.source_depth is Depth.F32:
        raise ParameterError("max_val must be given explicitly for float images")
    return {Depth.U8: 255.0, Depth.U16: 65535.0}[img.source_depth]


def psnr(a: Image2D, b: Image2D, max_val: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    _same_shape(a, b)
    if max_val is None:
        max_val = default_max_val(a)
    if not max_val > 0:
        raise ParameterError("max_val must be positive")
    mse = np.mean((a.values - b.values) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(max_val**2 / mse))


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: Image2D, b: Image2D, data_range: float = 255.0, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM over every full 11x11 Gaussian window (sigma 1.5)."""
    _same_shape(a, b)
    if min(a.shape) < 11:
        raise ShapeError(f"SSIM needs at least 11x11 pixels, got {a.shape}")
    w = _ssim_window()
    x, y = a.values, b.values

    def filt(v):
        return ndimage.correlate(v, w, mode="constant")[5:-5, 5:-5]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a: Image2D, b: Image2D, data_range: float = 255.0) -> float:
    return float(ssim_map(a, b, data_range).mean())


# ---------------------------------------------------------------- profiles


@dataclass(eq=False)
class LineProfile:
    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.positions.shape != self.intensities.shape or self.positions.ndim != 1:
            raise ShapeError("profile positions and intensities must be 1D and equally long")
        if self.positions.size > 1 and not np.all(np.diff(self.positions) > 0):
            raise ValueError("profile positions must be strictly increasing")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["position_nm", "intensity"])
            out.writerows(zip(self.positions.tolist(), self.intensities.tolist()))
        return path


def line_profile(img: Image2D, row: int, col_range: tuple[int, int] | None = None) -> LineProfile:
    """Horizontal profile along ``row`` over columns ``[start, stop)``."""
    if not 0 <= row < img.height:
        raise IndexError(f"row {row} outside image of height {img.height}")
    start, stop = col_range if col_range is not None else (0, img.width)
    if not 0 <= start < stop <= img.width:
        raise IndexError(f"column span [{start}, {stop}) outside image of width {img.width}")
    cols = np.arange(start, stop)
    return LineProfile(cols * img.pixel_pitch_nm, img.values[row, start:stop].copy())


@dataclass(frozen=True)
class FwhmMeasurement:
    width_nm: float
    left_nm: float
    right_nm: float
    peak: float
    baseline: float
    multimodal: bool


def measure_fwhm(profile: LineProfile) -> FwhmMeasurement:
    """FWHM of the global-maximum peak above the profile minimum.

    Half-maximum crossings are linearly interpolated between the first samples
    at or below half height on either side of the peak.
    """
    x, v = profile.positions, profile.intensities
    if v.size < 3:
        raise NoPeakError("profile too short")
    i = int(np.argmax(v))
    peak, base = float(v[i]), float(v.min())
    if peak <= base:
        raise NoPeakError("flat profile has no peak")
    half = base + 0.5 * (peak - base)

    left = i
    while left > 0 and v[left] > half:
        left -= 1
    right = i
    while right < v.size - 1 and v[right] > half:
        right += 1
    if v[left] > half or v[right] > half:
        raise NoPeakError("no half-maximum crossing on one side of the peak")

    def cross(lo, hi):
        return x[lo] + (half - v[lo]) / (v[hi] - v[lo]) * (x[hi] - x[lo])

    xl = cross(left, left + 1)
    xr = cross(right, right - 1)
    outside = np.r_[v[:left], v[right + 1 :]]
    return FwhmMeasurement(float(xr - xl), float(xl), float(xr), peak, base, bool(np.any(outside > half)))


def fwhm(profile: LineProfile) -> float:
    """FWHM in the profile's position units (nm)."""
    return measure_fwhm(profile).width_nm


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    fwhm_nm: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)


# ------------------------------------------------------------------- stacks


def stack_result(slices, z_step_nm: float, out_dir, depth: Depth | str = Depth.F32) -> tuple[ImageStack, Path]:
    """Write each slice plus a ``stack.json`` manifest ordered by z."""
    stack = ImageStack(list(slices), z_step_nm)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = Depth(depth)
    ext = ".f32" if depth is Depth.F32 else ".pgm"
    paths = [
        save_image(s, out_dir / f"slice_{z:04d}{ext}", depth, z_index=z).relative_to(out_dir)
        for z, s in enumerate(stack.slices)
    ]
    return stack, save_stack_manifest(paths, z_step_nm, out_dir / "stack.json")


def reload_stack(manifest_path) -> ImageStack:
    return load_stack(manifest_path)


def max_intensity_projection(stack: ImageStack) -> Image2D:
    return stack.slices[0].with_values(stack.as_array().max(axis=0))
