"""Minimal dense/conv network substrate with unit-level interventions.

Models are pure data: a ModelSpec lists layers, a ParameterSet maps parameter
names to float64 arrays.  Every operation is a deterministic function of its
inputs; nothing keeps hidden state.  All arithmetic is 64-bit.

Unit addressing: parameterized layers (dense, conv2d) are numbered 0..P-1 in
network order, and a unit is an output neuron of a dense layer or an output
channel of a conv layer.  The "activation" of a unit is its value after the
relu that immediately follows its layer (or the raw layer output when no relu
follows).  Interventions scale that value; gradients are taken with respect
to it (summed over spatial positions for conv channels).
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

Array = np.ndarray
ParameterSet = dict[str, np.ndarray]

PARAM_KINDS = ("dense", "conv2d")
LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten", "softmax")

CHECKPOINT_MAGIC = b"FUSIM1"


class NNError(ValueError):
    """Base class for model construction and evaluation errors."""


class ShapeMismatchError(NNError):
    pass


class InvalidUnitError(NNError):
    pass


class CheckpointError(NNError):
    pass


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    pool_size: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NNError(f"unknown layer kind {self.kind!r}")


def dense(fan_in: int, fan_out: int) -> LayerSpec:
    if fan_in < 1 or fan_out < 1:
        raise NNError("dense dimensions must be positive")
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out)


def conv2d(in_channels: int, out_channels: int, kernel_size: int) -> LayerSpec:
    if min(in_channels, out_channels, kernel_size) < 1:
        raise NNError("conv2d dimensions must be positive")
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(pool_size: int = 2) -> LayerSpec:
    if pool_size < 1:
        raise NNError("pool size must be positive")
    return LayerSpec("maxpool2d", pool_size=pool_size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass(frozen=True)
class UnitId:
    """Address of one unit: parameterized-layer ordinal and output index."""
    layer: int
    unit: int

    def as_dict(self) -> dict:
        return {"layer": self.layer, "unit": self.unit}


def _shape_after(layer: LayerSpec, shape: tuple[int, ...], pos: int) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "dense":
        if shape != (layer.fan_in,):
            raise ShapeMismatchError(
                f"layer {pos} (dense): expected input shape ({layer.fan_in},), got {shape}")
        return (layer.fan_out,)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeMismatchError(
                f"layer {pos} (conv2d): expected input shape ({layer.in_channels}, H, W), got {shape}")
        c, h, w = shape
        k = layer.kernel_size
        if h < k or w < k:
            raise ShapeMismatchError(
                f"layer {pos} (conv2d): spatial size {h}x{w} smaller than kernel {k}")
        return (layer.out_channels, h - k + 1, w - k + 1)
    if kind == "relu":
        return shape
    if kind == "maxpool2d":
        if len(shape) != 3:
            raise ShapeMismatchError(
                f"layer {pos} (maxpool2d): expected (C, H, W) input, got {shape}")
        c, h, w = shape
        p = layer.pool_size
        if h < p or w < p:
            raise ShapeMismatchError(
                f"layer {pos} (maxpool2d): spatial size {h}x{w} smaller than pool {p}")
        return (c, h // p, w // p)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "softmax":
        if len(shape) != 1:
            raise ShapeMismatchError(
                f"layer {pos} (softmax): expected flat input, got {shape}")
        return shape
    raise NNError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack ending in softmax over class_count outputs."""
    layers: tuple[LayerSpec, ...]
    class_count: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.class_count < 1:
            raise NNError("class_count must be positive")
        if any(d < 1 for d in self.input_shape):
            raise NNError("input_shape entries must be positive")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise NNError("model must end with a softmax layer")
        shapes = [self.input_shape]
        for pos, layer in enumerate(self.layers):
            shapes.append(_shape_after(layer, shapes[-1], pos))
        if shapes[-1] != (self.class_count,):
            raise ShapeMismatchError(
                f"final layer produces {shapes[-1]}, expected ({self.class_count},)")
        param_positions = tuple(i for i, l in enumerate(self.layers) if l.kind in PARAM_KINDS)
        # Activation site: the relu directly after the layer, else the layer itself.
        site_positions = []
        for p in param_positions:
            nxt = p + 1
            if nxt < len(self.layers) and self.layers[nxt].kind == "relu":
                site_positions.append(nxt)
            else:
                site_positions.append(p)
        object.__setattr__(self, "_shapes", tuple(shapes))
        object.__setattr__(self, "_param_positions", param_positions)
        object.__setattr__(self, "_site_positions", tuple(site_positions))
        object.__setattr__(self, "_site_by_pos", {s: o for o, s in enumerate(site_positions)})

    @property
    def param_layer_count(self) -> int:
        return len(self._param_positions)

    def layer_at(self, ordinal: int) -> LayerSpec:
        return self.layers[self._param_positions[ordinal]]

    def unit_count(self, ordinal: int) -> int:
        layer = self.layer_at(ordinal)
        return layer.fan_out if layer.kind == "dense" else layer.out_channels

    def site_position(self, ordinal: int) -> int:
        return self._site_positions[ordinal]

    def validate_unit(self, unit: UnitId) -> None:
        if not 0 <= unit.layer < self.param_layer_count:
            raise InvalidUnitError(
                f"unit layer {unit.layer} out of range (model has "
                f"{self.param_layer_count} parameterized layers)")
        width = self.unit_count(unit.layer)
        if not 0 <= unit.unit < width:
            raise InvalidUnitError(
                f"unit {unit.unit} out of range for layer {unit.layer} (width {width})")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for ordinal, pos in enumerate(self._param_positions):
            layer = self.layers[pos]
            if layer.kind == "dense":
                out[f"layer{ordinal}.weight"] = (layer.fan_in, layer.fan_out)
                out[f"layer{ordinal}.bias"] = (layer.fan_out,)
            else:
                k = layer.kernel_size
                out[f"layer{ordinal}.weight"] = (layer.out_channels, layer.in_channels, k, k)
                out[f"layer{ordinal}.bias"] = (layer.out_channels,)
        return out

    def all_units(self) -> list[UnitId]:
        return [UnitId(l, k)
                for l in range(self.param_layer_count)
                for k in range(self.unit_count(l))]


def small_mlp(input_shape: Sequence[int], class_count: int, hidden: int = 128) -> ModelSpec:
    """Reference spec: flatten -> dense(hidden) -> relu -> dense(C) -> softmax."""
    flat = int(np.prod(input_shape))
    layers = (flatten(), dense(flat, hidden), relu(), dense(hidden, class_count), softmax())
    return ModelSpec(layers, class_count, tuple(input_shape))


def small_cnn(input_shape: Sequence[int], class_count: int) -> ModelSpec:
    """Reference spec: two conv/relu/pool blocks followed by a dense classifier."""
    c, h, w = input_shape
    layers = [conv2d(c, 8, 3), relu(), maxpool2d(2),
              conv2d(8, 16, 3), relu(), maxpool2d(2), flatten()]
    h1, w1 = (h - 2) // 2, (w - 2) // 2
    h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
    layers += [dense(16 * h2 * w2, class_count), softmax()]
    return ModelSpec(tuple(layers), class_count, tuple(input_shape))


# ---------------------------------------------------------------------------
# Parameters


def make_rng(seed, *tags: int) -> np.random.Generator:
    """Generator seeded from an int or tuple seed plus integer stream tags."""
    if isinstance(seed, (tuple, list)):
        entropy = tuple(int(s) for s in seed) + tags
    else:
        entropy = (int(seed),) + tags
    return np.random.default_rng(entropy)


def init_params(spec: ModelSpec, seed) -> ParameterSet:
    """Fan-in-scaled uniform weights, zero biases, fully seed-determined."""
    params: ParameterSet = {}
    for ordinal in range(spec.param_layer_count):
        layer = spec.layer_at(ordinal)
        rng = make_rng(seed, 101, ordinal)
        if layer.kind == "dense":
            bound = 1.0 / np.sqrt(layer.fan_in)
            w = rng.uniform(-bound, bound, size=(layer.fan_in, layer.fan_out))
            b = np.zeros(layer.fan_out)
        else:
            k = layer.kernel_size
            bound = 1.0 / np.sqrt(layer.in_channels * k * k)
            w = rng.uniform(-bound, bound,
                            size=(layer.out_channels, layer.in_channels, k, k))
            b = np.zeros(layer.out_channels)
        params[f"layer{ordinal}.weight"] = w
        params[f"layer{ordinal}.bias"] = b
    return params


def validate_params(spec: ModelSpec, params: ParameterSet) -> None:
    expected = spec.param_shapes()
    if list(params.keys()) != list(expected.keys()):
        raise ShapeMismatchError(
            f"parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(
                f"parameter {name}: expected shape {shape}, got {params[name].shape}")


def params_copy(params: ParameterSet) -> ParameterSet:
    return {k: v.copy() for k, v in params.items()}


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def params_allclose(a: ParameterSet, b: ParameterSet, atol: float = 0.0,
                    rtol: float = 1e-12) -> bool:
    return list(a) == list(b) and all(
        np.allclose(a[k], b[k], atol=atol, rtol=rtol) for k in a)


def zero_units(spec: ModelSpec, params: ParameterSet, units: Iterable[UnitId]) -> ParameterSet:
    """Zero the incoming weights and bias of each unit; idempotent, local."""
    out = params_copy(params)
    for unit in units:
        spec.validate_unit(unit)
        layer = spec.layer_at(unit.layer)
        w = out[f"layer{unit.layer}.weight"]
        b = out[f"layer{unit.layer}.bias"]
        if layer.kind == "dense":
            w[:, unit.unit] = 0.0
        else:
            w[unit.unit] = 0.0
        b[unit.unit] = 0.0
    return out


# ---------------------------------------------------------------------------
# Forward / backward engine (batched)


@dataclass
class ActivationTrace:
    """Post-activation site output and per-unit scalar activation per layer.

    unit_activations[l][k] is the activation of unit (l, k): the value itself
    for dense units, the spatial mean of the channel map for conv channels.
    """
    layer_outputs: list[np.ndarray]
    unit_activations: list[np.ndarray]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NNError(f"non-finite values in {what}")


def _as_batch(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(
            f"input: expected shape {spec.input_shape} per example, got {x.shape[1:]}")
    return x


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, c, k, k), (s[0], s[2], s[3], s[1], s[2], s[3]))


def _scale_slice(h: np.ndarray, unit: int, scales) -> np.ndarray:
    out = h.copy()
    if out.ndim == 2:
        out[:, unit] *= scales
    else:
        s = scales if np.isscalar(scales) else np.asarray(scales)[:, None, None]
        out[:, unit] *= s
    return out


def _forward_engine(spec: ModelSpec, params: ParameterSet, x: np.ndarray,
                    intervention: tuple[int, int, object] | None = None,
                    keep_caches: bool = False, capture_sites: bool = False):
    """Run the layer stack on a batch.

    intervention = (ordinal, unit, scales) multiplies the unit's activation
    site by scales (scalar or per-sample vector) before downstream layers.
    Returns (probs, caches, sites): caches feed _backward_engine, sites holds
    the post-activation (pre-intervention) output per parameterized layer.
    """
    iv_pos = -1
    if intervention is not None:
        ordinal, unit, scales = intervention
        iv_pos = spec.site_position(ordinal)
    caches: list | None = [] if keep_caches else None
    sites: list | None = [] if capture_sites else None
    h = x
    ordinal_counter = 0
    for pos, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "dense":
            w = params[f"layer{ordinal_counter}.weight"]
            b = params[f"layer{ordinal_counter}.bias"]
            if keep_caches:
                caches.append(("dense", h, ordinal_counter))
            h = h @ w + b
            ordinal_counter += 1
        elif kind == "conv2d":
            w = params[f"layer{ordinal_counter}.weight"]
            b = params[f"layer{ordinal_counter}.bias"]
            patches = _im2col(h, layer.kernel_size)
            if keep_caches:
                caches.append(("conv2d", patches, h.shape, ordinal_counter))
            out = np.tensordot(patches, w, axes=([3, 4, 5], [1, 2, 3]))
            h = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
            ordinal_counter += 1
        elif kind == "relu":
            mask = h > 0
            if keep_caches:
                caches.append(("relu", mask))
            h = np.where(mask, h, 0.0)
        elif kind == "maxpool2d":
            p = layer.pool_size
            b_, c_, hh, ww = h.shape
            h2, w2 = hh // p, ww // p
            hc = h[:, :, :h2 * p, :w2 * p]
            windows = hc.reshape(b_, c_, h2, p, w2, p).transpose(0, 1, 2, 4, 3, 5)
            windows = windows.reshape(b_, c_, h2, w2, p * p)
            idx = windows.argmax(axis=-1)
            if keep_caches:
                caches.append(("maxpool2d", idx, h.shape, p))
            h = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        elif kind == "flatten":
            if keep_caches:
                caches.append(("flatten", h.shape))
            h = h.reshape(h.shape[0], -1)
        elif kind == "softmax":
            z = h - h.max(axis=1, keepdims=True)
            e = np.exp(z)
            h = e / e.sum(axis=1, keepdims=True)
            if keep_caches:
                caches.append(("softmax", h))
        else:
            raise NNError(f"unknown layer kind {kind!r}")
        site_ordinal = spec._site_by_pos.get(pos)
        if site_ordinal is not None:
            if capture_sites:
                sites.append(h)
            if pos == iv_pos:
                h = _scale_slice(h, unit, scales)
    return h, caches, sites


def _backward_engine(spec: ModelSpec, params: ParameterSet, caches: list,
                     grad_probs: np.ndarray,
                     intervention: tuple[int, int, object] | None = None):
    """Backpropagate a gradient at the probabilities.

    Returns (param gradients, per-sample gradient at the intervention site or
    None).  The captured gradient is taken with respect to the scaled unit
    value, summed over spatial positions for conv channels.
    """
    iv_pos = -1
    if intervention is not None:
        ordinal, unit, scales = intervention
        iv_pos = spec.site_position(ordinal)
    grads: ParameterSet = {}
    unit_grad = None
    g = grad_probs
    for pos in reversed(range(len(spec.layers))):
        if pos == iv_pos:
            if g.ndim == 2:
                unit_grad = g[:, unit].copy()
            else:
                unit_grad = g[:, unit].sum(axis=(1, 2))
            g = _scale_slice(g, unit, scales)
        cache = caches[pos]
        kind = cache[0]
        if kind == "dense":
            _, x_in, ordinal = cache
            w = params[f"layer{ordinal}.weight"]
            grads[f"layer{ordinal}.weight"] = x_in.T @ g
            grads[f"layer{ordinal}.bias"] = g.sum(axis=0)
            g = g @ w.T
        elif kind == "conv2d":
            _, patches, in_shape, ordinal = cache
            w = params[f"layer{ordinal}.weight"]
            k = w.shape[-1]
            gs = g.transpose(0, 2, 3, 1)  # (B, oh, ow, out)
            grads[f"layer{ordinal}.weight"] = np.tensordot(
                gs, patches, axes=([0, 1, 2], [0, 1, 2]))
            grads[f"layer{ordinal}.bias"] = gs.sum(axis=(0, 1, 2))
            pad = k - 1
            gpad = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            gpatches = _im2col(gpad, k)  # (B, H, W, out, k, k)
            wflip = w[:, :, ::-1, ::-1]
            dx = np.tensordot(gpatches, wflip, axes=([3, 4, 5], [0, 2, 3]))
            g = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        elif kind == "relu":
            g = np.where(cache[1], g, 0.0)
        elif kind == "maxpool2d":
            _, idx, in_shape, p = cache
            b_, c_, hh, ww = in_shape
            h2, w2 = idx.shape[2], idx.shape[3]
            dwin = np.zeros((b_, c_, h2, w2, p * p))
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dwin = dwin.reshape(b_, c_, h2, w2, p, p).transpose(0, 1, 2, 4, 3, 5)
            dcrop = dwin.reshape(b_, c_, h2 * p, w2 * p)
            dx = np.zeros(in_shape)
            dx[:, :, :h2 * p, :w2 * p] = dcrop
            g = dx
        elif kind == "flatten":
            g = g.reshape(cache[1])
        elif kind == "softmax":
            probs = cache[1]
            dot = (g * probs).sum(axis=1, keepdims=True)
            g = probs * (g - dot)
        else:
            raise NNError(f"unknown cache kind {kind!r}")
    fixed = {name: grads[name] for name in params}
    return fixed, unit_grad


# ---------------------------------------------------------------------------
# Public operations


def forward(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray):
    """Class probabilities plus the activation trace for one input."""
    validate_params(spec, params)
    x = _as_batch(spec, np.asarray(inputs, dtype=np.float64)[None])
    _check_finite(x, "input")
    probs, _, sites = _forward_engine(spec, params, x, capture_sites=True)
    _check_finite(probs, "probabilities")
    layer_outputs = []
    unit_activations = []
    for arr in sites:
        one = arr[0]
        layer_outputs.append(one)
        unit_activations.append(one if one.ndim == 1 else one.mean(axis=(1, 2)))
    return probs[0], ActivationTrace(layer_outputs, unit_activations)


def predict_probs(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray) -> np.ndarray:
    """Batched probabilities; no trace capture."""
    x = _as_batch(spec, inputs)
    probs, _, _ = _forward_engine(spec, params, x)
    return probs


def batch_unit_activations(spec: ModelSpec, params: ParameterSet,
                           inputs: np.ndarray) -> list[np.ndarray]:
    """Per-sample unit activations, one (B, units) matrix per layer ordinal."""
    x = _as_batch(spec, inputs)
    _, _, sites = _forward_engine(spec, params, x, capture_sites=True)
    out = []
    for arr in sites:
        out.append(arr if arr.ndim == 2 else arr.mean(axis=(2, 3)))
    return out


def forward_with_scaled_unit(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray,
                             unit: UnitId, scale: float) -> np.ndarray:
    """Forward pass with the unit's activation multiplied by scale in [0, 1]."""
    spec.validate_unit(unit)
    if not np.isscalar(scale) or not 0.0 <= float(scale) <= 1.0:
        raise NNError(f"scale must be a scalar in [0, 1], got {scale!r}")
    x = _as_batch(spec, np.asarray(inputs, dtype=np.float64)[None])
    probs, _, _ = _forward_engine(spec, params, x,
                                  intervention=(unit.layer, unit.unit, float(scale)))
    _check_finite(probs, "probabilities")
    return probs[0]


def gradient_wrt_unit(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray,
                      target_class: int, unit: UnitId, scale: float) -> float:
    """d P(target_class | input) / d(activation), at the scaled activation."""
    spec.validate_unit(unit)
    if not 0 <= target_class < spec.class_count:
        raise NNError(f"target class {target_class} out of range")
    if not 0.0 <= float(scale) <= 1.0:
        raise NNError(f"scale must be in [0, 1], got {scale!r}")
    g = batch_unit_gradients(spec, params, np.asarray(inputs, dtype=np.float64)[None],
                             target_class, unit, np.asarray([float(scale)]))
    return float(g[0])


def batch_unit_gradients(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray,
                         target_class: int, unit: UnitId,
                         scales: np.ndarray) -> np.ndarray:
    """Per-sample dP(target)/d(activation) with per-sample activation scales."""
    spec.validate_unit(unit)
    x = _as_batch(spec, inputs)
    scales = np.asarray(scales, dtype=np.float64)
    iv = (unit.layer, unit.unit, scales)
    probs, caches, _ = _forward_engine(spec, params, x, intervention=iv, keep_caches=True)
    seed = np.zeros_like(probs)
    seed[:, target_class] = 1.0
    _, unit_grad = _backward_engine(spec, params, caches, seed, intervention=iv)
    return unit_grad


def loss_and_gradient(spec: ModelSpec, params: ParameterSet, batch):
    """Mean cross-entropy loss and its exact gradient for (input, label) pairs."""
    pairs = [(np.asarray(img, dtype=np.float64), int(lbl)) for img, lbl in batch]
    if not pairs:
        raise NNError("empty batch")
    xs = np.stack([p[0] for p in pairs])
    ys = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return batch_loss_and_gradient(spec, params, xs, ys)


def batch_loss_and_gradient(spec: ModelSpec, params: ParameterSet,
                            inputs: np.ndarray, labels: np.ndarray):
    x = _as_batch(spec, inputs)
    ys = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise NNError("empty batch")
    if ys.min() < 0 or ys.max() >= spec.class_count:
        raise NNError(
            f"label out of range: got {int(ys.min())}..{int(ys.max())}, "
            f"class_count {spec.class_count}")
    probs, caches, _ = _forward_engine(spec, params, x, keep_caches=True)
    n = x.shape[0]
    py = probs[np.arange(n), ys]
    if np.any(py <= 0.0):
        raise NNError("predicted probability underflow; loss not finite")
    loss = float(-np.log(py).mean())
    grad_probs = np.zeros_like(probs)
    grad_probs[np.arange(n), ys] = -1.0 / (n * py)
    grads, _ = _backward_engine(spec, params, caches, grad_probs)
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    return loss, grads


def sgd_step(params: ParameterSet, gradient: ParameterSet, learning_rate: float) -> ParameterSet:
    """params - learning_rate * gradient, element-wise."""
    if learning_rate < 0 or not np.isfinite(learning_rate):
        raise NNError(f"learning rate must be finite and non-negative, got {learning_rate}")
    if list(params) != list(gradient):
        raise ShapeMismatchError("gradient names do not match parameters")
    out: ParameterSet = {}
    for name, p in params.items():
        g = gradient[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient {name}: expected shape {p.shape}, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NNError(f"non-finite gradient for {name}")
        out[name] = p - learning_rate * g
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: "FUSIM1" magic, text manifest, little-endian float64 data


def save_checkpoint(path, params: ParameterSet) -> None:
    buf = io.BytesIO()
    offset = 0
    lines = []
    blobs = []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        raw = a.astype("<f8").tobytes()
        shape = "x".join(str(d) for d in a.shape) if a.shape else "1"
        lines.append(f"{name} {shape} {offset}\n")
        blobs.append(raw)
        offset += len(raw)
    buf.write(CHECKPOINT_MAGIC + b"\n")
    for line in lines:
        buf.write(line.encode("ascii"))
    buf.write(b"end\n")
    for raw in blobs:
        buf.write(raw)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        data = fh.read()
    header_end = data.find(b"end\n")
    if not data.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise CheckpointError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    if header_end < 0:
        raise CheckpointError(f"{path}: manifest terminator missing")
    manifest = data[len(CHECKPOINT_MAGIC) + 1:header_end].decode("ascii").splitlines()
    blob = data[header_end + 4:]
    params: ParameterSet = {}
    for line in manifest:
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
        name, shape_s, offset_s = parts
        shape = tuple(int(d) for d in shape_s.split("x"))
        count = int(np.prod(shape))
        offset = int(offset_s)
        if offset + count * 8 > len(blob):
            raise CheckpointError(f"{path}: data truncated for parameter {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
    return params
