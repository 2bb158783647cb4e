"""Training loop, checkpoints and tiled inference."""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, ParameterError, ShapeError, TrainingError
from ..imgcore import Image2D, assemble_tiles, normalize_unit, split_tiles
from .model import AnetConfig, AnetModel, buffer_shapes, model_gradients, parameter_shapes, predict_probabilities
from .optim import AdamState, adam_step
from ..workers import parallel_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogRow:
    epoch: int
    step: int
    loss: float
    clamped_pixels: int


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: AnetModel, stem, adam: AdamState | None = None, epoch: int = 0) -> Path:
    """Write ``<stem>.json`` (layout) and ``<stem>.bin`` (little-endian float32)."""
    stem = Path(stem)
    entries, chunks, offset = [], [], 0
    for kind, tensors in (("param", model.params), ("buffer", model.buffers)):
        for name, v in tensors.items():
            entries.append({"name": name, "kind": kind, "shape": list(v.shape), "offset": offset})
            chunks.append(v.astype("<f4").ravel())
            offset += v.size
    meta = {
        "config": model.config.to_dict(),
        "entries": entries,
        "adam": adam.metadata() if adam else None,
        "epoch": epoch,
        "dtype": "<f4",
    }
    stem.with_suffix(".bin").write_bytes(np.concatenate(chunks).tobytes())
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> AnetModel:
    path = Path(path).with_suffix(".json")
    try:
        meta = json.loads(path.read_text())
        cfg = AnetConfig(**meta["config"])
        flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float64)
        model = AnetModel(cfg)
        for e in meta["entries"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            target = model.params if e["kind"] == "param" else model.buffers
            target[e["name"]] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).copy()
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad checkpoint ({exc})") from exc
    model.params = OrderedDict((n, model.params[n]) for n in parameter_shapes(cfg) if n in model.params)
    model.buffers = OrderedDict((n, model.buffers[n]) for n in buffer_shapes(cfg) if n in model.buffers)
    model.audit()
    return model


def write_log(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "step", "loss", "clamped_pixels"])
        for r in rows:
            out.writerow([r.epoch, r.step, repr(r.loss), r.clamped_pixels])
    return path


# ------------------------------------------------------------------ training


def _load_samples(manifest, depth):
    samples = []
    step = 2**depth
    for i in range(len(manifest)):
        pair = manifest.load_pair(i)
        h, w = pair.original.shape
        if h % step or w % step:
            raise ShapeError(f"tile {h}x{w} is not divisible by 2**depth = {step}")
        samples.append(
            (
                pair.original.values[None, None],
                pair.label.values.astype(np.int64)[None],
                pair.weight[None],
            )
        )
    return samples


def train(
    manifest,
    cfg: AnetConfig,
    epochs: int = 200,
    lr: float = 1e-4,
    seed: int = 0,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
    log_path=None,
) -> tuple[AnetModel, list[LogRow]]:
    """Adam with batch size 1 over a seeded per-epoch shuffle.

    Aborts with :class:`TrainingError` on a non-finite loss, after writing a
    ``diverged`` checkpoint when ``checkpoint_dir`` is set.
    """
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    if len(manifest) == 0:
        raise ParameterError("cannot train on an empty manifest")
    rng = np.random.default_rng(seed)
    model = AnetModel.initialize(cfg, rng)
    adam = AdamState(lr=lr)
    samples = _load_samples(manifest, cfg.depth)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    step = 0
    for epoch in range(1, epochs + 1):
        for i in rng.permutation(len(samples)):
            x, g, w = samples[i]
            bundle = model_gradients(model, x, g, w, update_stats=True)
            step += 1
            if not np.isfinite(bundle.value):
                if ckpt_dir:
                    save_checkpoint(model, ckpt_dir / "diverged", adam, epoch)
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} (sample {i})")
            rows.append(LogRow(epoch, step, bundle.value, bundle.clamped))
            adam_step(adam, model.params, bundle.grads)
        if epoch == 1 or epoch % 10 == 0 or epoch == epochs:
            n = len(samples)
            log.info("epoch %d mean loss %.5f", epoch, np.mean([r.loss for r in rows[-n:]]))
        if ckpt_dir and checkpoint_every and epoch % checkpoint_every == 0:
            save_checkpoint(model, ckpt_dir / f"epoch_{epoch:04d}", adam, epoch)
    if log_path:
        write_log(rows, log_path)
    return model, rows


def epoch_means(rows) -> list[float]:
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r.epoch, []).append(r.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# ----------------------------------------------------------------- inference


def predict_tile(model: AnetModel, tile: Image2D) -> Image2D:
    """Foreground probability map of one tile (eval-mode batch norm)."""
    probs = predict_probabilities(model, tile.values[None, None])
    return tile.with_values(probs[0, 1])


def predict_image(model: AnetModel, img: Image2D, tile_size: int, workers: int = 1) -> Image2D:
    """Normalize, split into tiles, predict each, and reassemble at full size."""
    tiles, grid = split_tiles(normalize_unit(img), tile_size)
    preds = parallel_map(lambda t: predict_tile(model, t), tiles, workers)
    return assemble_tiles(preds, grid, img.width, img.height)
