"""Calibrated grayscale images: representation, file I/O, depth conversion, tiling.

Files on disk are binary PGM (P5, maxval 255 or 65535, big-endian samples) or a
raw little-endian float32 payload ``<name>.f32`` next to a JSON sidecar
``<name>.json`` holding ``width``, ``height`` and ``pixel_pitch_nm``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DepthError, FormatError, ParameterError, RangeError, ShapeError

DEFAULT_PITCH_NM = 250.0


class Depth(str, enum.Enum):
    U8 = "U8"
    U16 = "U16"
    F32 = "F32"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None

    @property
    def maxval(self) -> int | None:
        return {Depth.U8: 255, Depth.U16: 65535}.get(self)


@dataclass(eq=False)
class Image2D:
    """A 2D intensity plane with its pixel calibration.

    ``flags`` carries non-fatal notes raised by the stage that produced the
    image (e.g. ``"all_zero"``).
    """

    values: np.ndarray
    pixel_pitch_nm: float = DEFAULT_PITCH_NM
    source_depth: Depth = Depth.F32
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ShapeError(f"image must be a non-empty 2D array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("image values must be finite")
        if not self.pixel_pitch_nm > 0:
            raise ParameterError(f"pixel_pitch_nm must be positive, got {self.pixel_pitch_nm}")
        self.source_depth = Depth(self.source_depth)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values, **changes) -> "Image2D":
        """Copy of this image with new values, keeping calibration."""
        changes.setdefault("flags", ())
        return replace(self, values=values, **changes)


@dataclass(eq=False)
class ImageStack:
    slices: list[Image2D]
    z_step_nm: float

    def __post_init__(self):
        if not self.slices:
            raise ShapeError("an image stack needs at least one slice")
        if not self.z_step_nm > 0:
            raise ParameterError(f"z_step_nm must be positive, got {self.z_step_nm}")
        first = self.slices[0]
        for i, s in enumerate(self.slices[1:], start=1):
            if s.shape != first.shape or s.pixel_pitch_nm != first.pixel_pitch_nm:
                raise ShapeError(
                    f"slice {i} has shape {s.shape} @ {s.pixel_pitch_nm} nm, "
                    f"expected {first.shape} @ {first.pixel_pitch_nm} nm"
                )

    def as_array(self) -> np.ndarray:
        return np.stack([s.values for s in self.slices])


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    rows: int
    cols: int
    origin_order: str = "row-major"

    def __len__(self):
        return self.rows * self.cols


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


# --------------------------------------------------------------------------- I/O


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_sidecar(path: Path) -> dict:
    side = _sidecar(path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: bad JSON sidecar ({exc})") from exc


def _parse_pgm(data: bytes, path) -> tuple[np.ndarray, int]:
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and chr(data[pos]).isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive PGM dimensions {w}x{h}")
    if maxval not in (255, 65535):
        raise DepthError(f"{path}: unsupported PGM maxval {maxval} (need 255 or 65535)")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    payload = data[pos:]
    if len(payload) != w * h * dtype.itemsize:
        raise FormatError(
            f"{path}: PGM payload is {len(payload)} bytes, expected {w * h * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(h, w), maxval


def load_image(path, pixel_pitch_nm: float | None = None) -> Image2D:
    """Read a PGM or raw-float image. Values are the raw stored samples.

    The pitch comes from ``pixel_pitch_nm`` if given, else from a JSON
    sidecar, else defaults to 250 nm.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".f32")
    meta = _read_sidecar(path)
    if path.suffix == ".f32":
        if not meta:
            raise FormatError(f"{path}: raw float image without JSON sidecar")
        try:
            w, h = int(meta["width"]), int(meta["height"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: sidecar lacks width/height") from exc
        raw = path.read_bytes()
        if len(raw) != 4 * w * h:
            raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {4 * w * h}")
        values = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
        depth = Depth.F32
    else:
        values, maxval = _parse_pgm(path.read_bytes(), path)
        values = values.astype(np.float64)
        depth = Depth.U16 if maxval == 65535 else Depth.U8
    if pixel_pitch_nm is None:
        pixel_pitch_nm = float(meta.get("pixel_pitch_nm", DEFAULT_PITCH_NM))
    return Image2D(values, pixel_pitch_nm=pixel_pitch_nm, source_depth=depth)


def save_image(img: Image2D, path, depth: Depth | str | None = None, z_index: int | None = None) -> Path:
    """Write ``img`` at ``depth`` (defaults to the image's source depth).

    U8/U16 values are rounded half away from zero; anything that then falls
    outside ``[0, maxval]`` raises :class:`RangeError` instead of clipping.
    Returns the path of the payload file.
    """
    depth = Depth(depth or img.source_depth)
    path = Path(path)
    meta = {"width": img.width, "height": img.height, "pixel_pitch_nm": img.pixel_pitch_nm}
    if z_index is not None:
        meta["z_index"] = int(z_index)
    if depth is Depth.F32:
        path = path.with_suffix(".f32")
        vals = img.values.astype("<f4")
        if not np.all(np.isfinite(vals)):
            raise RangeError("value overflows float32")
        path.write_bytes(vals.tobytes())
    else:
        maxval = depth.maxval
        rounded = round_half_away(img.values)
        bad = (rounded < 0) | (rounded > maxval)
        if np.any(bad):
            y, x = np.argwhere(bad)[0]
            raise RangeError(
                f"value {img.values[y, x]!r} at ({y}, {x}) is outside [0, {maxval}] for {depth.value}"
            )
        dtype = ">u2" if depth is Depth.U16 else "u1"
        header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
        path.write_bytes(header + rounded.astype(dtype).tobytes())
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True))
    return path


def save_stack_manifest(paths, z_step_nm: float, manifest_path) -> Path:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    rel = [str(Path(p).relative_to(base)) if Path(p).is_absolute() else str(p) for p in paths]
    manifest_path.write_text(json.dumps({"z_step_nm": z_step_nm, "slices": rel}, indent=2))
    return manifest_path


def load_stack(manifest_path) -> ImageStack:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
        paths, z_step = doc["slices"], float(doc["z_step_nm"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: bad stack manifest ({exc})") from exc
    slices = [load_image(manifest_path.parent / p) for p in paths]
    return ImageStack(slices, z_step)


# ------------------------------------------------------------- pixel operations


def convert_16_to_8(img: Image2D) -> Image2D:
    """Full-range linear projection of 16-bit data onto 8 bits."""
    if img.source_depth is not Depth.U16:
        raise DepthError(f"convert_16_to_8 needs a U16 image, got {img.source_depth.value}")
    v = img.values
    if v.min() < 0 or v.max() > 65535:
        raise RangeError("U16 image has values outside [0, 65535]")
    return img.with_values(round_half_away(v * 255.0 / 65535.0), source_depth=Depth.U8)


def normalize_unit(img: Image2D) -> Image2D:
    peak = img.values.max()
    if peak <= 0:
        return img.with_values(np.zeros_like(img.values), flags=("all_zero",))
    return img.with_values(img.values / peak)


# ----------------------------------------------------------------------- tiling


def split_tiles(img: Image2D, tile_size: int) -> tuple[list[Image2D], TileGrid]:
    """Cut ``img`` into square tiles in row-major order.

    Sides that are not multiples of ``tile_size`` are reflect-padded on the
    right/bottom first.
    """
    if int(tile_size) != tile_size or tile_size < 8:
        raise ParameterError(f"tile_size must be an integer >= 8, got {tile_size}")
    tile_size = int(tile_size)
    h, w = img.shape
    rows, cols = math.ceil(h / tile_size), math.ceil(w / tile_size)
    pad_h, pad_w = rows * tile_size - h, cols * tile_size - w
    if pad_h >= h or pad_w >= w:
        raise ShapeError(f"tile_size {tile_size} too large for a {w}x{h} image")
    v = img.values
    if pad_h or pad_w:
        v = np.pad(v, ((0, pad_h), (0, pad_w)), mode="reflect")
    tiles = [
        img.with_values(v[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size].copy())
        for r in range(rows)
        for c in range(cols)
    ]
    return tiles, TileGrid(tile_size, rows, cols)


def assemble_tiles(tiles, grid: TileGrid, target_w: int, target_h: int) -> Image2D:
    if len(tiles) != grid.rows * grid.cols:
        raise ShapeError(f"grid {grid.rows}x{grid.cols} needs {len(grid)} tiles, got {len(tiles)}")
    t = grid.tile_size
    for i, tile in enumerate(tiles):
        if tile.shape != (t, t):
            raise ShapeError(f"tile {i} has shape {tile.shape}, expected {(t, t)}")
    if target_h > grid.rows * t or target_w > grid.cols * t:
        raise ShapeError("target size exceeds the tiled area")
    full = np.empty((grid.rows * t, grid.cols * t))
    for i, tile in enumerate(tiles):
        r, c = divmod(i, grid.cols)
        full[r * t : (r + 1) * t, c * t : (c + 1) * t] = tile.values
    return tiles[0].with_values(full[:target_h, :target_w].copy())
