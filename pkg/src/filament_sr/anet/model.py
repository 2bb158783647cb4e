"""The same-convolution encoder-decoder network, its loss and analytic gradients."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ParameterError, ShapeError
from . import layers as L

CLAMP_FLOOR = 1e-12


@dataclass(frozen=True)
class AnetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    classes: int = 2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        if self.base_channels < 1:
            raise ParameterError("base_channels must be >= 1")
        if self.in_channels != 1 or self.classes != 2:
            raise ParameterError("only single-channel input and two classes are supported")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_block_shapes(prefix, cin, cout):
    return [
        (f"{prefix}.conv.w", (cout, cin, 3, 3)),
        (f"{prefix}.conv.b", (cout,)),
        (f"{prefix}.bn.gamma", (cout,)),
        (f"{prefix}.bn.beta", (cout,)),
    ]


def parameter_shapes(cfg: AnetConfig) -> OrderedDict:
    """Trainable parameter names and shapes, in checkpoint order."""
    shapes = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        c = cfg.channels(lvl)
        shapes += _conv_block_shapes(f"enc{lvl}.1", cin, c) + _conv_block_shapes(f"enc{lvl}.2", c, c)
        cin = c
    c = cfg.channels(cfg.depth)
    shapes += _conv_block_shapes("mid.1", cin, c) + _conv_block_shapes("mid.2", c, c)
    for lvl in reversed(range(cfg.depth)):
        c = cfg.channels(lvl)
        shapes += [(f"dec{lvl}.up.w", (2 * c, c, 2, 2)), (f"dec{lvl}.up.b", (c,))]
        shapes += _conv_block_shapes(f"dec{lvl}.1", 2 * c, c) + _conv_block_shapes(f"dec{lvl}.2", c, c)
    shapes += [("head.w", (cfg.classes, cfg.channels(0), 1, 1)), ("head.b", (cfg.classes,))]
    return OrderedDict(shapes)


def buffer_shapes(cfg: AnetConfig) -> OrderedDict:
    """Batch-norm running statistics (not trained by gradient)."""
    out = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bn.gamma"):
            stem = name[: -len(".gamma")]
            out[f"{stem}.running_mean"] = shape
            out[f"{stem}.running_var"] = shape
    return out


@dataclass(eq=False)
class AnetModel:
    config: AnetConfig
    params: OrderedDict = field(default_factory=OrderedDict)
    buffers: OrderedDict = field(default_factory=OrderedDict)

    @classmethod
    def initialize(cls, cfg: AnetConfig, rng: np.random.Generator) -> "AnetModel":
        """He-normal kernels, zero biases, unit BN scale, zero BN shift."""
        params = OrderedDict()
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith(".w"):
                # conv: fan_in = C_in*k*k; tconv: each output sums C_in taps
                fan_in = shape[0] if ".up." in name else int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        buffers = OrderedDict(
            (n, np.ones(s) if n.endswith("running_var") else np.zeros(s)) for n, s in buffer_shapes(cfg).items()
        )
        return cls(cfg, params, buffers)

    def copy(self) -> "AnetModel":
        return AnetModel(
            self.config,
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def audit(self):
        """Raise if any parameter or buffer disagrees with the config's layout."""
        for expected, actual, what in (
            (parameter_shapes(self.config), self.params, "parameter"),
            (buffer_shapes(self.config), self.buffers, "buffer"),
        ):
            if list(expected) != list(actual):
                raise ShapeError(f"{what} names do not match the config layout")
            for name, shape in expected.items():
                if actual[name].shape != tuple(shape):
                    raise ShapeError(f"{what} {name} has shape {actual[name].shape}, expected {shape}")
        for name, v in self.buffers.items():
            if name.endswith("running_var") and np.any(v <= 0):
                raise ShapeError(f"{name} must stay positive")

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


# ------------------------------------------------------------------- forward


def _conv_bn_relu(model, prefix, h, train, update, tape):
    p, buf, cfg = model.params, model.buffers, model.config
    h, c_conv = L.conv2d_same_forward(h, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"])
    h, c_bn = L.batchnorm_forward(
        h,
        p[f"{prefix}.bn.gamma"],
        p[f"{prefix}.bn.beta"],
        buf[f"{prefix}.bn.running_mean"],
        buf[f"{prefix}.bn.running_var"],
        train,
        cfg.bn_epsilon,
        cfg.bn_momentum,
        update,
    )
    h, c_relu = L.relu_forward(h)
    tape.append(("block", prefix, (c_conv, c_bn, c_relu)))
    return h


def anet_forward(model: AnetModel, x: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Class scores (N, 2, H, W) for input (N, 1, H, W).

    Returns ``(scores, tape)``; the tape is what :func:`anet_backward` needs
    and is only meaningful in ``"train"`` mode.
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input must be (N, {cfg.in_channels}, H, W), got {x.shape}")
    step = 2**cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"H and W must be divisible by 2**depth = {step}, got {x.shape[2]}x{x.shape[3]}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    p = model.params
    tape = []
    skips = []
    h = np.asarray(x, dtype=np.float64)
    for lvl in range(cfg.depth):
        h = _conv_bn_relu(model, f"enc{lvl}.1", h, train, update_stats, tape)
        h = _conv_bn_relu(model, f"enc{lvl}.2", h, train, update_stats, tape)
        skips.append(h)
        tape.append(("tap", lvl, None))
        h, c_pool = L.maxpool2_forward(h)
        tape.append(("pool", lvl, c_pool))
    h = _conv_bn_relu(model, "mid.1", h, train, update_stats, tape)
    h = _conv_bn_relu(model, "mid.2", h, train, update_stats, tape)
    for lvl in reversed(range(cfg.depth)):
        h, c_up = L.tconv2_forward(h, p[f"dec{lvl}.up.w"], p[f"dec{lvl}.up.b"])
        tape.append(("up", f"dec{lvl}.up", c_up))
        h = L.concat_skip(skips[lvl], h)
        tape.append(("concat", lvl, skips[lvl].shape[1]))
        h = _conv_bn_relu(model, f"dec{lvl}.1", h, train, update_stats, tape)
        h = _conv_bn_relu(model, f"dec{lvl}.2", h, train, update_stats, tape)
    scores, c_head = L.conv2d_same_forward(h, p["head.w"], p["head.b"])
    tape.append(("head", "head", c_head))
    return scores, tape


def anet_backward(dscores: np.ndarray, tape) -> OrderedDict:
    """Back-propagate ``dE/dscores`` through a train-mode tape."""
    grads = {}
    skip_grads = {}
    dh = dscores
    for kind, key, cache in reversed(tape):
        if kind == "head":
            dh, grads["head.w"], grads["head.b"] = L.conv2d_same_backward(dh, cache)
        elif kind == "block":
            c_conv, c_bn, c_relu = cache
            dh = L.relu_backward(dh, c_relu)
            dh, grads[f"{key}.bn.gamma"], grads[f"{key}.bn.beta"] = L.batchnorm_backward(dh, c_bn)
            dh, grads[f"{key}.conv.w"], grads[f"{key}.conv.b"] = L.conv2d_same_backward(dh, c_conv)
        elif kind == "concat":
            skip_grads[key], dh = L.split_skip(dh, cache)
        elif kind == "up":
            dh, grads[f"{key}.w"], grads[f"{key}.b"] = L.tconv2_backward(dh, cache)
        elif kind == "pool":
            dh = L.maxpool2_backward(dh, cache)
        elif kind == "tap":
            dh = dh + skip_grads.pop(key)
    return grads


# ---------------------------------------------------------------------- loss


@dataclass(eq=False)
class LossBundle:
    value: float
    grads: OrderedDict = field(default_factory=OrderedDict)
    clamped: int = 0


def _as_truth(g, shape):
    g = np.asarray(g)
    n, _, h, w = shape
    g = g.reshape(n, h, w) if g.size == n * h * w else g
    if g.shape != (n, h, w):
        raise ShapeError(f"truth map shape {g.shape} does not match {(n, h, w)}")
    return g.astype(np.int64)


def _as_weight(w, shape):
    n, _, h, wd = shape
    w = np.asarray(w, dtype=np.float64)
    if w.size != n * h * wd:
        raise ShapeError(f"weight map has {w.size} entries, expected {n * h * wd}")
    return w.reshape(n, h, wd)


def weighted_ce_loss(probs, truth, weight, reduction: str = "mean") -> LossBundle:
    """E = -sum w log P_truth, divided by sum w for ``reduction="mean"``.

    Probabilities below 1e-12 are clamped before the log; the count is kept.
    """
    g = _as_truth(truth, probs.shape)
    w = _as_weight(weight, probs.shape)
    pg = np.take_along_axis(probs, g[:, None], axis=1)[:, 0]
    clamped = int(np.count_nonzero(pg < CLAMP_FLOOR))
    total = -np.sum(w * np.log(np.maximum(pg, CLAMP_FLOOR)))
    if reduction == "mean":
        wsum = w.sum()
        total = total / wsum if wsum > 0 else 0.0
    elif reduction != "sum":
        raise ParameterError(f"unknown reduction {reduction!r}")
    return LossBundle(float(total), OrderedDict(), clamped)


def model_gradients(model: AnetModel, x, truth, weight, reduction: str = "mean", update_stats: bool = False) -> LossBundle:
    """Loss and gradient of every trainable parameter for one train-mode pass."""
    scores, tape = anet_forward(model, x, "train", update_stats)
    probs = L.softmax_pixelwise(scores)
    bundle = weighted_ce_loss(probs, truth, weight, reduction)
    g = _as_truth(truth, probs.shape)
    w = _as_weight(weight, probs.shape)
    if reduction == "mean":
        wsum = w.sum()
        w = w / wsum if wsum > 0 else np.zeros_like(w)
    dscores = probs.copy()
    np.put_along_axis(dscores, g[:, None], np.take_along_axis(dscores, g[:, None], axis=1) - 1.0, axis=1)
    dscores *= w[:, None]
    grads = anet_backward(dscores, tape)
    bundle.grads = OrderedDict((name, grads[name]) for name in model.params)
    return bundle


def predict_probabilities(model: AnetModel, x) -> np.ndarray:
    scores, _ = anet_forward(model, x, "eval")
    return L.softmax_pixelwise(scores)
