"""Label synthesis: wavelet denoising, Lucy-Richardson deconvolution, binarization.

The wavelet transform is the periodized orthonormal filter bank, so forward
and inverse are exact transposes and energy is preserved. Odd sides are
extended by repeating the last row/column before each level.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError
from .imgcore import Image2D
from .synthlab import Boundary, Psf, convolve2d, gaussian_psf

MAD_TO_SIGMA = 0.6745

_SQ3 = math.sqrt(3.0)
_LOWPASS = {
    "haar": np.array([1.0, 1.0]) / math.sqrt(2.0),
    "db4": np.array([1 + _SQ3, 3 + _SQ3, 3 - _SQ3, 1 - _SQ3]) / (4 * math.sqrt(2.0)),
}


class Wavelet(str, enum.Enum):
    HAAR = "haar"
    DAUBECHIES4 = "db4"


@dataclass(frozen=True)
class WaveletSpec:
    family: Wavelet = Wavelet.HAAR
    levels: int = 2
    threshold_mode: str = "soft"
    threshold_value: float | str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "family", Wavelet(self.family))
        if self.levels < 1:
            raise ParameterError("wavelet levels must be >= 1")
        if self.threshold_mode not in ("soft", "hard"):
            raise ParameterError(f"threshold_mode must be 'soft' or 'hard', got {self.threshold_mode!r}")
        if self.threshold_value != "auto" and not float(self.threshold_value) >= 0:
            raise ParameterError("threshold_value must be 'auto' or a non-negative number")


@dataclass(eq=False)
class DwtPyramid:
    """Approximation band plus ``(horizontal, vertical, diagonal)`` details.

    ``details[0]`` is the finest level. ``shapes[k]`` is the (unpadded) input
    shape that level ``k`` was computed from.
    """

    approximation: np.ndarray
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    shapes: list[tuple[int, int]]
    pixel_pitch_nm: float = 250.0

    def coefficient_count(self) -> int:
        return self.approximation.size + sum(b.size for lvl in self.details for b in lvl)

    def energy(self) -> float:
        return float(np.sum(self.approximation**2) + sum(np.sum(b**2) for lvl in self.details for b in lvl))


@lru_cache(maxsize=64)
def _analysis_matrix(family: Wavelet, n: int) -> np.ndarray:
    """Orthogonal ``n x n`` periodized DWT matrix: lowpass rows then highpass rows."""
    h = _LOWPASS[family.value]
    g = np.array([(-1) ** k * h[len(h) - 1 - k] for k in range(len(h))])
    half = n // 2
    m = np.zeros((n, n))
    for i in range(half):
        for k in range(len(h)):
            m[i, (2 * i + k) % n] += h[k]
            m[half + i, (2 * i + k) % n] += g[k]
    m.setflags(write=False)
    return m


def _extend_even(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    if h % 2:
        a = np.vstack([a, a[-1:]])
    if w % 2:
        a = np.hstack([a, a[:, -1:]])
    return a


def _check_levels(shape, levels: int):
    m = min(shape)
    if levels > int(math.floor(math.log2(m))) or m < 2**levels:
        raise ParameterError(f"{levels} wavelet levels is too many for a {shape[1]}x{shape[0]} image")


def dwt2_forward(img: Image2D, spec: WaveletSpec) -> DwtPyramid:
    _check_levels(img.shape, spec.levels)
    a = img.values
    details, shapes = [], []
    for _ in range(spec.levels):
        shapes.append(a.shape)
        a = _extend_even(a)
        rows = _analysis_matrix(spec.family, a.shape[0])
        cols = _analysis_matrix(spec.family, a.shape[1])
        c = rows @ a @ cols.T
        hh, hw = a.shape[0] // 2, a.shape[1] // 2
        # horizontal: highpass across rows (responds to horizontal edges)
        details.append((c[hh:, :hw].copy(), c[:hh, hw:].copy(), c[hh:, hw:].copy()))
        a = c[:hh, :hw].copy()
    return DwtPyramid(a, details, shapes, img.pixel_pitch_nm)


def dwt2_inverse(pyr: DwtPyramid, spec: WaveletSpec) -> Image2D:
    if len(pyr.details) != spec.levels or len(pyr.shapes) != spec.levels:
        raise ShapeError(f"pyramid has {len(pyr.details)} levels, spec expects {spec.levels}")
    a = pyr.approximation
    for level in reversed(range(spec.levels)):
        horiz, vert, diag = pyr.details[level]
        if not (a.shape == horiz.shape == vert.shape == diag.shape):
            raise ShapeError(f"band shapes disagree at level {level + 1}")
        h, w = pyr.shapes[level]
        if (a.shape[0] * 2 - h) not in (0, 1) or (a.shape[1] * 2 - w) not in (0, 1):
            raise ShapeError(f"level {level + 1} bands {a.shape} do not match recorded shape {(h, w)}")
        c = np.block([[a, vert], [horiz, diag]])
        rows = _analysis_matrix(spec.family, c.shape[0])
        cols = _analysis_matrix(spec.family, c.shape[1])
        a = (rows.T @ c @ cols)[:h, :w]
    return Image2D(a, pixel_pitch_nm=pyr.pixel_pitch_nm)


def threshold_coefficients(c: np.ndarray, t: float, mode: str) -> np.ndarray:
    if mode == "soft":
        return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)
    return np.where(np.abs(c) < t, 0.0, c)


def universal_threshold(pyr: DwtPyramid, n_pixels: int) -> float:
    sigma = np.median(np.abs(pyr.details[0][2])) / MAD_TO_SIGMA
    return float(sigma * math.sqrt(2.0 * math.log(n_pixels)))


def wavelet_denoise(img: Image2D, spec: WaveletSpec) -> Image2D:
    """Threshold all detail bands and reconstruct; negatives are clamped to 0."""
    pyr = dwt2_forward(img, spec)
    if spec.threshold_value == "auto":
        t = universal_threshold(pyr, img.values.size)
    else:
        t = float(spec.threshold_value)
    pyr.details = [tuple(threshold_coefficients(b, t, spec.threshold_mode) for b in lvl) for lvl in pyr.details]
    out = dwt2_inverse(pyr, spec).values
    return img.with_values(np.clip(out, 0.0, None))


# ------------------------------------------------------------ Lucy-Richardson


@dataclass(frozen=True)
class LrSpec:
    psf: Psf = field(default_factory=lambda: gaussian_psf(2.0))
    iterations: int = 20
    epsilon: float = 1e-12
    boundary: Boundary = Boundary.REFLECT

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("LR iterations must be >= 1")
        if not 0 < self.epsilon <= 1e-3:
            raise ParameterError("LR epsilon must lie in (0, 1e-3]")


def iterate_lucy_richardson(observed: Image2D, spec: LrSpec):
    """Yield the estimate after each of ``spec.iterations`` multiplicative updates."""
    d = observed.values
    if np.any(d < 0):
        raise ParameterError("Lucy-Richardson needs a non-negative observation")
    u = observed.with_values(d.copy())
    flipped = Psf(spec.psf.flipped)
    for _ in range(spec.iterations):
        blurred = convolve2d(u, spec.psf, spec.boundary).values
        ratio = u.with_values(d / np.maximum(blurred, spec.epsilon))
        u = u.with_values(u.values * convolve2d(ratio, flipped, spec.boundary).values)
        yield u


def lucy_richardson(observed: Image2D, spec: LrSpec) -> Image2D:
    if not np.any(observed.values):
        return observed.with_values(np.zeros_like(observed.values), flags=("all_zero",))
    for u in iterate_lucy_richardson(observed, spec):
        pass
    return u


def poisson_loglik(observed: np.ndarray, estimate: Image2D, psf: Psf, boundary=Boundary.REFLECT) -> float:
    """Sum of d ln(u*p) - u*p (constant terms dropped)."""
    model = convolve2d(estimate, psf, boundary).values
    pos = observed > 0
    return float(np.sum(observed[pos] * np.log(model[pos])) - model.sum())


# ----------------------------------------------------------------- binarize


def _otsu_split(values: np.ndarray, bins: int):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise ParameterError("Otsu threshold undefined for a constant image (degenerate histogram)")
    idx = np.minimum(((v - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    p = np.bincount(idx.ravel(), minlength=bins) / idx.size
    centres = np.arange(bins) + 0.5
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centres)[:-1]
    mt = np.sum(p * centres)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * (1.0 - w0))
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return k, idx, lo, hi


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold over a histogram of min-max normalized values.

    Returned in the input's units: the lower edge of the first foreground bin.
    """
    k, _, lo, hi = _otsu_split(values, bins)
    return float(lo + (k + 1) / bins * (hi - lo))


def binarize(img: Image2D, method: str | float = "otsu") -> Image2D:
    """Map to {0, 1} by Otsu's method or a fixed threshold (foreground is ``> t``)."""
    if method == "otsu":
        k, idx, _, _ = _otsu_split(img.values, 256)
        mask = idx > k
    else:
        mask = img.values > float(method)
    return img.with_values(mask.astype(np.float64))


def make_label(raw_upsampled: Image2D, wspec: WaveletSpec | None = None, lspec: LrSpec | None = None) -> Image2D:
    """Denoise, deconvolve and Otsu-binarize a preprocessed image into a label."""
    wspec = wspec or WaveletSpec()
    lspec = lspec or LrSpec()
    if not np.any(raw_upsampled.values):
        return raw_upsampled.with_values(np.zeros_like(raw_upsampled.values), flags=("all_zero",))
    denoised = wavelet_denoise(raw_upsampled, wspec)
    deconvolved = lucy_richardson(denoised, lspec)
    if "all_zero" in deconvolved.flags:
        return deconvolved
    return binarize(deconvolved, "otsu")
