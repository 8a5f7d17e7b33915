"""Minimal deterministic neural-network engine.

Arrays are plain ``numpy.ndarray`` objects in float64. Layers are small frozen
dataclasses; parameters live in a ``ParamSet`` keyed by layer index so a list
of layer specs plus a ``ParamSet`` fully describes a network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class AvgPool2d:
    window: int


@dataclass(frozen=True)
class Flatten:
    pass


# The two kinds below only appear in probe decoders.
@dataclass(frozen=True)
class Upsample2d:
    factor: int


@dataclass(frozen=True)
class Unflatten:
    shape: tuple[int, ...]


LayerSpec = Union[Dense, ReLU, Conv2d, AvgPool2d, Flatten, Upsample2d, Unflatten]
PARAMETRIC = (Dense, Conv2d)


@dataclass
class Param:
    weights: np.ndarray
    bias: np.ndarray
    trainable: bool = True

    def copy(self) -> "Param":
        return Param(self.weights.copy(), self.bias.copy(), self.trainable)


ParamSet = dict[int, Param]


@dataclass
class OptState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


# ----------------------------------------------------------------------------
# shape checking

def _layer_out_shape(i: int, layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ShapeError(f"layer {i} ({layer}): expected input shape ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"layer {i} ({layer}): expected input shape ({layer.in_channels}, H, W), got {shape}")
        _, h, w = shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {i} ({layer}): input {shape} too small for kernel")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, AvgPool2d):
        if len(shape) != 3 or shape[1] % layer.window or shape[2] % layer.window:
            raise ShapeError(f"layer {i} ({layer}): spatial dims of {shape} not divisible by window")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Upsample2d):
        if len(shape) != 3:
            raise ShapeError(f"layer {i} ({layer}): expected (C, H, W) input, got {shape}")
        return (shape[0], shape[1] * layer.factor, shape[2] * layer.factor)
    if isinstance(layer, Unflatten):
        if int(np.prod(shape)) != int(np.prod(layer.shape)):
            raise ShapeError(f"layer {i} ({layer}): cannot reshape {shape} to {layer.shape}")
        return tuple(layer.shape)
    raise ConfigError(f"layer {i}: unknown layer kind {type(layer).__name__}")


def _validate_layer(i: int, layer: LayerSpec) -> None:
    if isinstance(layer, Dense):
        if layer.in_dim < 1 or layer.out_dim < 1:
            raise ConfigError(f"layer {i} ({layer}): dimensions must be positive")
    elif isinstance(layer, Conv2d):
        if layer.in_channels < 1 or layer.out_channels < 1:
            raise ConfigError(f"layer {i} ({layer}): channels must be positive")
        if layer.kernel not in (1, 3):
            raise ConfigError(f"layer {i} ({layer}): kernel must be 1 or 3")
        if layer.stride < 1 or layer.padding < 0:
            raise ConfigError(f"layer {i} ({layer}): bad stride/padding")
    elif isinstance(layer, (AvgPool2d, Upsample2d)):
        if (layer.window if isinstance(layer, AvgPool2d) else layer.factor) < 1:
            raise ConfigError(f"layer {i} ({layer}): window must be positive")
    elif not isinstance(layer, (ReLU, Flatten, Unflatten)):
        raise ConfigError(f"layer {i}: unknown layer kind {type(layer).__name__}")


def check_spec(spec: Sequence[LayerSpec], input_shape: tuple[int, ...] | None = None) -> tuple[int, ...] | None:
    """Validate a layer sequence and return its output shape (if input_shape is given).

    Without an input shape only feature/channel compatibility between
    neighbouring parametric layers is checked.
    """
    for i, layer in enumerate(spec):
        _validate_layer(i, layer)
    if input_shape is not None:
        shape = tuple(input_shape)
        for i, layer in enumerate(spec):
            try:
                shape = _layer_out_shape(i, layer, shape)
            except ShapeError as exc:
                raise ConfigError(str(exc)) from None
        return shape
    # Partial check: channel/feature continuity while the "width" is known.
    width = None
    for i, layer in enumerate(spec):
        if isinstance(layer, Dense):
            if width is not None and width != layer.in_dim:
                raise ConfigError(f"layer {i} ({layer}): expects {layer.in_dim} inputs, previous layer gives {width}")
            width = layer.out_dim
        elif isinstance(layer, Conv2d):
            if width is not None and width != layer.in_channels:
                raise ConfigError(f"layer {i} ({layer}): expects {layer.in_channels} channels, previous layer gives {width}")
            width = layer.out_channels
        elif isinstance(layer, (Flatten, Unflatten)):
            width = None
    return None


def output_shape(spec: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for i, layer in enumerate(spec):
        shape = _layer_out_shape(i, layer, shape)
    return shape


# ----------------------------------------------------------------------------
# parameters

def init_params(spec: Sequence[LayerSpec], seed: int) -> ParamSet:
    """Fan-in scaled uniform init (bound sqrt(6 / fan_in)); zero biases."""
    check_spec(spec)
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for i, layer in enumerate(spec):
        if isinstance(layer, Dense):
            bound = math.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim))
            params[i] = Param(w, np.zeros(layer.out_dim))
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            params[i] = Param(w, np.zeros(layer.out_channels))
    return params


def count_params(spec: Sequence[LayerSpec]) -> int:
    total = 0
    for layer in spec:
        if isinstance(layer, Dense):
            total += layer.in_dim * layer.out_dim + layer.out_dim
        elif isinstance(layer, Conv2d):
            total += layer.kernel * layer.kernel * layer.in_channels * layer.out_channels + layer.out_channels
    return total


def copy_params(params: ParamSet) -> ParamSet:
    return {i: p.copy() for i, p in params.items()}


def frozen(params: ParamSet) -> ParamSet:
    """Deep copy with every entry marked non-trainable."""
    return {i: Param(p.weights.copy(), p.bias.copy(), False) for i, p in params.items()}


def _check_params(spec: Sequence[LayerSpec], params: ParamSet) -> None:
    for i, layer in enumerate(spec):
        if isinstance(layer, PARAMETRIC) and i not in params:
            raise ShapeError(f"layer {i} ({layer}) has no parameters")
    for i in params:
        if i >= len(spec) or not isinstance(spec[i], PARAMETRIC):
            raise ShapeError(f"parameter entry {i} does not match a parametric layer")


# ----------------------------------------------------------------------------
# conv helpers

def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)
    return cols, ho, wo


def _conv_forward(layer: Conv2d, p: Param, x: np.ndarray) -> np.ndarray:
    k = layer.kernel
    cols, ho, wo = _im2col(x, k, layer.stride, layer.padding)
    wmat = p.weights.reshape(layer.out_channels, -1)
    out = cols @ wmat.T + p.bias
    return out.transpose(0, 3, 1, 2)


def _conv_backward(layer: Conv2d, p: Param, x: np.ndarray, dout: np.ndarray, need_dx: bool):
    k, s, pad = layer.kernel, layer.stride, layer.padding
    cols, ho, wo = _im2col(x, k, s, pad)
    b = x.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
    flat = cols.reshape(-1, cols.shape[-1])
    dw = (d.T @ flat).reshape(p.weights.shape)
    db = d.sum(axis=0)
    dx = None
    if need_dx:
        wmat = p.weights.reshape(layer.out_channels, -1)
        dcols = (d @ wmat).reshape(b, ho, wo, layer.in_channels, k, k)
        h, w = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
        dxp = np.zeros((b, layer.in_channels, h, w))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : h - pad, pad : w - pad] if pad else dxp
    return dw, db, dx


# ----------------------------------------------------------------------------
# forward / backward

def forward(spec: Sequence[LayerSpec], params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run ``x`` (batch first) through the network.

    Returns the output and a cache holding every layer's input.
    """
    h = np.asarray(x, dtype=np.float64)
    cache: list[np.ndarray] = []
    for i, layer in enumerate(spec):
        try:
            _layer_out_shape(i, layer, h.shape[1:])
        except ShapeError as exc:
            raise ShapeError(f"{exc} (batch shape {h.shape})") from None
        cache.append(h)
        if isinstance(layer, Dense):
            p = params[i]
            h = h @ p.weights + p.bias
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Conv2d):
            h = _conv_forward(layer, params[i], h)
        elif isinstance(layer, AvgPool2d):
            b, c, hh, ww = h.shape
            w = layer.window
            h = h.reshape(b, c, hh // w, w, ww // w, w).mean(axis=(3, 5))
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Upsample2d):
            f = layer.factor
            h = h.repeat(f, axis=2).repeat(f, axis=3)
        elif isinstance(layer, Unflatten):
            h = h.reshape((h.shape[0],) + tuple(layer.shape))
    return h, cache


def predict(spec: Sequence[LayerSpec], params: ParamSet, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, x)[0]


def backward(
    spec: Sequence[LayerSpec],
    params: ParamSet,
    cache: list[np.ndarray],
    dout: np.ndarray,
    return_input_grad: bool = False,
):
    """Backpropagate ``dout`` through the cached forward pass.

    Frozen layers get no gradient entry but still pass gradients upstream.
    """
    if len(cache) != len(spec):
        raise ShapeError(f"cache has {len(cache)} entries for a {len(spec)}-layer spec")
    _check_params(spec, params)
    grads: ParamSet = {}
    # Nothing upstream of the first trainable layer needs a gradient.
    first_trainable = next(
        (i for i, layer in enumerate(spec) if isinstance(layer, PARAMETRIC) and params[i].trainable),
        len(spec),
    )
    stop = 0 if return_input_grad else first_trainable
    g = dout
    for i in range(len(spec) - 1, stop - 1, -1):
        layer, x = spec[i], cache[i]
        need_dx = i > stop or return_input_grad
        if isinstance(layer, Dense):
            p = params[i]
            if p.trainable:
                grads[i] = Param(x.T @ g, g.sum(axis=0))
            g = g @ p.weights.T if need_dx else None
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, Conv2d):
            p = params[i]
            dw, db, dx = _conv_backward(layer, p, x, g, need_dx)
            if p.trainable:
                grads[i] = Param(dw, db)
            g = dx
        elif isinstance(layer, AvgPool2d):
            w = layer.window
            g = g.repeat(w, axis=2).repeat(w, axis=3) / (w * w)
        elif isinstance(layer, (Flatten, Unflatten)):
            g = g.reshape(x.shape)
        elif isinstance(layer, Upsample2d):
            b, c, hh, ww = x.shape
            f = layer.factor
            g = g.reshape(b, c, hh, f, ww, f).sum(axis=(3, 5))
        if g is None:
            break
    if return_input_grad:
        return grads, g
    return grads


# ----------------------------------------------------------------------------
# losses

def cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if b < 1:
        raise ValueError("cross_entropy needs at least one sample")
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {b} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / b


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ----------------------------------------------------------------------------
# optimisation

def sgd_step(params: ParamSet, grads: ParamSet, opt: OptState) -> tuple[ParamSet, OptState]:
    """One SGD-with-momentum step: v <- mu*v + g; theta <- theta - lr*v.

    Frozen entries (and entries without a gradient) are passed through as the
    same objects.
    """
    new_params: ParamSet = {}
    velocity = dict(opt.velocity)
    for i, p in params.items():
        g = grads.get(i)
        if not p.trainable or g is None:
            new_params[i] = p
            continue
        if g.weights.shape != p.weights.shape or g.bias.shape != p.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {i}")
        if i in velocity:
            vw, vb = velocity[i]
            vw = opt.momentum * vw + g.weights
            vb = opt.momentum * vb + g.bias
        else:
            vw, vb = g.weights.copy(), g.bias.copy()
        velocity[i] = (vw, vb)
        new_params[i] = Param(p.weights - opt.learning_rate * vw, p.bias - opt.learning_rate * vb, True)
    return new_params, OptState(opt.learning_rate, opt.momentum, velocity)


def fit(
    spec: Sequence[LayerSpec],
    params: ParamSet,
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    opt: OptState,
    batch_size: int,
    rng: np.random.Generator,
    loss_fn: Callable[[np.ndarray, object], tuple[float, np.ndarray]] = cross_entropy,
) -> tuple[ParamSet, list[tuple[float, float | None]]]:
    """Mini-batch SGD with a fresh permutation per epoch.

    Returns the trained params and one ``(mean loss, accuracy)`` pair per epoch;
    accuracy is ``None`` unless the loss is cross-entropy.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("fit needs at least one sample")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            out, cache = forward(spec, params, inputs[idx])
            loss, dout = loss_fn(out, targets[idx])
            grads = backward(spec, params, cache, dout)
            params, opt = sgd_step(params, grads, opt)
            total += loss * len(idx)
            if loss_fn is cross_entropy:
                correct += int((out.argmax(axis=1) == targets[idx]).sum())
        history.append((total / n, correct / n if loss_fn is cross_entropy else None))
    return params, history


# ----------------------------------------------------------------------------
# gradient oracle

def finite_diff_check(
    spec: Sequence[LayerSpec],
    params: ParamSet,
    batch: tuple[np.ndarray, Sequence[int]],
    epsilon: float = 1e-5,
    loss_fn: Callable[[np.ndarray, object], tuple[float, np.ndarray]] = cross_entropy,
) -> float:
    """Worst relative error between backprop and central differences.

    Every trainable scalar is perturbed; frozen layers are skipped.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must be in (0, 1e-2]")
    x, target = batch
    out, cache = forward(spec, params, x)
    _, dout = loss_fn(out, target)
    grads = backward(spec, params, cache, dout)

    def loss_at() -> float:
        return loss_fn(forward(spec, params, x)[0], target)[0]

    worst = 0.0
    for i, p in params.items():
        if not p.trainable:
            continue
        for arr, garr in ((p.weights, grads[i].weights), (p.bias, grads[i].bias)):
            flat, gflat = arr.reshape(-1), garr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                up = loss_at()
                flat[j] = orig - epsilon
                down = loss_at()
                flat[j] = orig
                numeric = (up - down) / (2 * epsilon)
                analytic = gflat[j]
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def min_preactivation(spec: Sequence[LayerSpec], params: ParamSet, x: np.ndarray) -> float:
    """Smallest |z| fed into any ReLU; inf when the network has no ReLU."""
    _, cache = forward(spec, params, x)
    m = math.inf
    for layer, inp in zip(spec, cache):
        if isinstance(layer, ReLU) and inp.size:
            m = min(m, float(np.abs(inp).min()))
    return m
