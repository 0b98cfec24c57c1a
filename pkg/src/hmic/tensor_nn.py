"""Minimal neural-network numeric core.

Images and feature maps are numpy arrays laid out channel-last, ``(H, W, C)``
for a single tensor or ``(N, H, W, C)`` for a batch.  Every public op accepts
either form and returns the same form it was given.  Ops preserve the floating
dtype of their inputs, so the same code runs in float32 for production and in
float64 when checking gradients against finite differences.

Besides the per-op functions there is a tiny sequential engine (``forward`` /
``backward``) driven by plain layer-spec dicts; model bundles, the patch
classifier and the filter autoencoder are all built on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ArgumentError

ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax")
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def as_tensor3(x, name="input") -> np.ndarray:
    """Validate an ``(H, W, C)`` array of finite reals and return it."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"{name}: expected an (H, W, C) tensor, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: tensor contains non-finite values")
    return x


@dataclass
class ConvLayer:
    """Kernels are laid out ``[out_channels][in_channels][k][k]``."""

    kernels: np.ndarray
    bias: np.ndarray
    padding: int = 1
    stride: int = 1

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels)
        self.bias = np.asarray(self.bias)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise DimensionError(f"kernels must be [out][in][k][k], got {self.kernels.shape}")
        if self.kernels.shape[2] % 2 == 0:
            raise DimensionError("kernel size must be odd")
        if self.bias.shape != (self.kernels.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} out channels")
        if self.stride < 1 or self.padding < 0:
            raise ArgumentError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]


@dataclass
class DenseLayer:
    """Weights are laid out ``[out][in]``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"inconsistent dense shapes: weights {self.weights.shape}, bias {self.bias.shape}")


@dataclass
class DropoutSpec:
    rate: float
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ArgumentError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class PoolIndices:
    """Winner positions from a max-pool call, needed to route gradients back."""

    argmax: np.ndarray  # (N, Ho, Wo, C), flat index inside each window
    input_shape: tuple
    window: int


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind in ("identity", "softmax"):
        # Inside the engine a softmax layer emits logits; the loss applies softmax.
        return z
    raise ArgumentError(f"unknown activation {kind!r}")


def _activation_backward(grad, out, kind):
    if kind == "relu":
        return grad * (out > 0)
    if kind == "sigmoid":
        return grad * out * (1 - out)
    return grad


def sparse_categorical_crossentropy(probs, label):
    """Loss ``-ln p[label]`` and its gradient w.r.t. the logits that produced ``probs``.

    ``probs[label]`` is clamped at 1e-12 before the log so a confident wrong
    prediction yields a large finite loss rather than ``inf``.
    """
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise DimensionError(f"label {label} out of range for {probs.shape[-1]} classes")
    loss = -np.log(max(float(probs[label]), LOG_CLAMP))
    grad = probs.copy()
    grad[label] -= 1
    return loss, grad


def softmax_cross_entropy(logits, labels):
    """Mean sparse categorical cross-entropy over a batch of logits.

    Returns ``(loss, probs, grad_logits)``; the gradient already includes the
    ``1/N`` of the mean.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    probs = softmax(logits, axis=1)
    picked = np.maximum(probs[np.arange(n), labels], LOG_CLAMP)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return loss, probs, grad / n


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def conv_output_size(size, k, padding, stride):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, k, padding, stride):
    n, h, w, c = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, Ho', Wo', C, k, k)
    if stride > 1:
        win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(dcols, x_shape, k, padding, stride, ho, wo):
    n, h, w, c = x_shape
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride, :] += dcols[..., di, dj]
    if padding:
        dxp = dxp[:, padding:padding + h, padding:padding + w, :]
    return dxp


def _conv_forward(x, kernels, bias, padding, stride):
    n = x.shape[0]
    o, _, k, _ = kernels.shape
    cols, ho, wo = _im2col(x, k, padding, stride)
    z = cols @ kernels.reshape(o, -1).T
    z += bias
    return z.reshape(n, ho, wo, o), cols


def _conv_backward(dz, cols, x_shape, kernels, padding, stride, need_input=True):
    n, ho, wo, o = dz.shape
    k = kernels.shape[2]
    dz2 = dz.reshape(-1, o)
    gk = (dz2.T @ cols).reshape(kernels.shape)
    gb = dz2.sum(axis=0)
    gx = None
    if need_input:
        dcols = dz2 @ kernels.reshape(o, -1)
        gx = _col2im(dcols, x_shape, k, padding, stride, ho, wo)
    return gx, gk, gb


def _check_conv(x, layer):
    if x.shape[-1] != layer.in_channels:
        raise DimensionError(
            f"input has {x.shape[-1]} channels, layer expects {layer.in_channels}")
    if not (np.all(np.isfinite(layer.kernels)) and np.all(np.isfinite(layer.bias))):
        raise NumericError("convolution weights contain non-finite values")
    k = layer.kernel_size
    if x.shape[1] + 2 * layer.padding < k or x.shape[2] + 2 * layer.padding < k:
        raise DimensionError(f"input {x.shape[1:3]} too small for a {k}x{k} kernel")


def conv2d(input, layer: ConvLayer, activation="identity"):
    """Multi-channel cross-correlation plus bias, followed by ``activation``.

    Output spatial size per axis is ``(H + 2*padding - k) // stride + 1``.
    """
    x, single = _batched(input)
    _check_conv(x, layer)
    z, _ = _conv_forward(x, layer.kernels, layer.bias, layer.padding, layer.stride)
    y = _activate(z, activation)
    if activation == "softmax":
        y = softmax(y, axis=-1)
    return y[0] if single else y


def conv2d_grad(input, layer: ConvLayer, upstream_grad, activation="identity"):
    """Gradients of a conv layer given the gradient w.r.t. its (activated) output.

    Returns ``(grad_input, grad_kernels, grad_bias)``.
    """
    if activation == "softmax":
        raise ArgumentError("conv2d_grad does not support a softmax activation")
    x, single = _batched(input)
    _check_conv(x, layer)
    g, _ = _batched(upstream_grad)
    z, cols = _conv_forward(x, layer.kernels, layer.bias, layer.padding, layer.stride)
    if g.shape != z.shape:
        raise DimensionError(f"upstream gradient shape {g.shape[1:]} != output shape {z.shape[1:]}")
    dz = _activation_backward(g, _activate(z, activation), activation)
    gx, gk, gb = _conv_backward(dz, cols, x.shape, layer.kernels, layer.padding, layer.stride)
    return (gx[0] if single else gx), gk, gb


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------

def _maxpool_forward(x, window):
    n, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by pool window {window}")
    ho, wo = h // window, w // window
    blocks = x.reshape(n, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, window * window)
    # argmax returns the first maximum, i.e. the smallest row-major index in the window.
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, PoolIndices(idx, x.shape, window)


def _maxpool_backward(indices: PoolIndices, g):
    n, h, w, c = indices.input_shape
    window = indices.window
    ho, wo = h // window, w // window
    if g.shape != (n, ho, wo, c) or indices.argmax.shape != (n, ho, wo, c):
        raise DimensionError(
            f"pool indices for input {indices.input_shape} do not match gradient {g.shape}")
    blocks = np.zeros((n, ho, wo, c, window * window), dtype=g.dtype)
    np.put_along_axis(blocks, indices.argmax[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    return blocks.reshape(n, h, w, c)


def maxpool(input, window: int):
    """Non-overlapping max pooling (stride == window).

    Returns ``(output, indices)``; ``indices`` feeds :func:`maxpool_grad`.
    Ties go to the smallest row-major position inside the window.
    """
    x, single = _batched(input)
    out, idx = _maxpool_forward(x, window)
    return (out[0] if single else out), idx


def maxpool_grad(indices: PoolIndices, upstream_grad):
    g, single = _batched(upstream_grad)
    gx = _maxpool_backward(indices, g)
    return gx[0] if single else gx


def _avgpool_forward(x, window):
    n, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by pool window {window}")
    return x.reshape(n, h // window, window, w // window, window, c).mean(axis=(2, 4))


def _avgpool_backward(g, window):
    return np.repeat(np.repeat(g, window, axis=1), window, axis=2) / (window * window)


def avgpool(input, window: int):
    """Area-average downsampling by an integer factor."""
    x, single = _batched(input)
    out = _avgpool_forward(x, window)
    return out[0] if single else out


def avgpool_grad(upstream_grad, window: int):
    g, single = _batched(upstream_grad)
    gx = _avgpool_backward(g, window)
    return gx[0] if single else gx


def upsample(input, factor: int):
    """Nearest-neighbour upsampling by an integer factor."""
    x, single = _batched(input)
    out = np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)
    return out[0] if single else out


def upsample_grad(upstream_grad, factor: int):
    g, single = _batched(upstream_grad)
    n, h, w, c = g.shape
    if h % factor or w % factor:
        raise DimensionError(f"gradient dims {h}x{w} not divisible by factor {factor}")
    gx = g.reshape(n, h // factor, factor, w // factor, factor, c).sum(axis=(2, 4))
    return gx[0] if single else gx


# ---------------------------------------------------------------------------
# Dense and dropout
# ---------------------------------------------------------------------------

def dense(input, layer: DenseLayer, activation="identity"):
    """``activation(W x + b)`` for a vector or a batch of row vectors."""
    x = np.asarray(input)
    if x.shape[-1] != layer.weights.shape[1]:
        raise DimensionError(
            f"input length {x.shape[-1]} != layer input size {layer.weights.shape[1]}")
    y = _activate(x @ layer.weights.T + layer.bias, activation)
    if activation == "softmax":
        y = softmax(y, axis=-1)
    return y


def dense_grad(input, layer: DenseLayer, upstream_grad, activation="identity"):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if activation == "softmax":
        raise ArgumentError("use softmax_cross_entropy for the gradient through softmax")
    x = np.asarray(input)
    g = np.asarray(upstream_grad)
    if x.shape[-1] != layer.weights.shape[1] or g.shape[-1] != layer.weights.shape[0]:
        raise DimensionError("dense_grad: input or gradient length mismatch")
    out = _activate(x @ layer.weights.T + layer.bias, activation)
    dz = _activation_backward(g, out, activation)
    x2, dz2 = np.atleast_2d(x), np.atleast_2d(dz)
    return dz @ layer.weights, dz2.T @ x2, dz2.sum(axis=0)


def dropout(input, spec: DropoutSpec, training: bool):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity at inference."""
    x = np.asarray(input)
    if not training or spec.rate == 0:
        return x
    rng = np.random.default_rng(spec.rng_seed)
    keep = rng.random(x.shape) >= spec.rate
    return x * keep.astype(x.dtype) / x.dtype.type(1.0 - spec.rate)


# ---------------------------------------------------------------------------
# Optimiser and gradient oracle
# ---------------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update, in place on ``params`` and ``state``.

    The step counter is incremented before bias correction.  Any NaN or inf in
    ``grads`` aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; Adam step aborted")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params, state


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], params, step=1e-5):
    """Central-difference gradient ``(f(p+h) - f(p-h)) / 2h`` for every entry of ``params``."""
    if step <= 0:
        raise ArgumentError("finite-difference step must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn(p)
        flat[i] = orig - step
        fm = loss_fn(p)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# Sequential engine
# ---------------------------------------------------------------------------
#
# Layer specs are dicts with a "type" key:
#   conv     name, in_channels, out_channels, kernel, padding, stride, activation
#   maxpool  name, window
#   avgpool  name, window
#   upsample name, factor
#   dropout  name, rate
#   flatten  name
#   dense    name, in_features, out_features, activation

def param_shapes(layers) -> dict:
    shapes = {}
    for spec in layers:
        if spec["type"] == "conv":
            k = spec["kernel"]
            shapes[spec["name"] + ".kernels"] = (spec["out_channels"], spec["in_channels"], k, k)
            shapes[spec["name"] + ".bias"] = (spec["out_channels"],)
        elif spec["type"] == "dense":
            shapes[spec["name"] + ".weights"] = (spec["out_features"], spec["in_features"])
            shapes[spec["name"] + ".bias"] = (spec["out_features"],)
    return shapes


def output_shapes(layers, input_shape) -> list:
    """Per-layer output shapes (without batch axis) for an ``(H, W, C)`` input.

    Raises DimensionError as soon as two layers do not chain.
    """
    shape = tuple(input_shape)
    shapes = []
    for spec in layers:
        kind = spec["type"]
        if kind == "conv":
            if len(shape) != 3 or shape[2] != spec["in_channels"]:
                raise DimensionError(f"{spec['name']}: input {shape} incompatible with conv")
            h = conv_output_size(shape[0], spec["kernel"], spec["padding"], spec["stride"])
            w = conv_output_size(shape[1], spec["kernel"], spec["padding"], spec["stride"])
            shape = (h, w, spec["out_channels"])
        elif kind in ("maxpool", "avgpool"):
            win = spec["window"]
            if len(shape) != 3 or shape[0] % win or shape[1] % win:
                raise DimensionError(f"{spec['name']}: {shape} not divisible by window {win}")
            shape = (shape[0] // win, shape[1] // win, shape[2])
        elif kind == "upsample":
            f = spec["factor"]
            shape = (shape[0] * f, shape[1] * f, shape[2])
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1 or shape[0] != spec["in_features"]:
                raise DimensionError(f"{spec['name']}: input {shape} != ({spec['in_features']},)")
            shape = (spec["out_features"],)
        elif kind != "dropout":
            raise ArgumentError(f"unknown layer type {kind!r}")
        shapes.append(shape)
    return shapes


def init_params(layers, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Kaiming-uniform for ReLU layers, Xavier-uniform otherwise.

    Softmax heads get a Xavier draw scaled by 0.01 so an untrained classifier
    starts close to the uniform distribution.
    """
    params = {}
    for spec in layers:
        if spec["type"] == "conv":
            k = spec["kernel"]
            fan_in = spec["in_channels"] * k * k
            fan_out = spec["out_channels"] * k * k
            shape = (spec["out_channels"], spec["in_channels"], k, k)
            prefix, wkey = spec["name"], ".kernels"
        elif spec["type"] == "dense":
            fan_in, fan_out = spec["in_features"], spec["out_features"]
            shape = (fan_out, fan_in)
            prefix, wkey = spec["name"], ".weights"
        else:
            continue
        act = spec.get("activation", "identity")
        if act == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            if act == "softmax":
                bound *= 0.01
        params[prefix + wkey] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[prefix + ".bias"] = np.zeros(shape[0], dtype=dtype)
    return params


def forward(layers, params, x, training=False, rng=None):
    """Run a batch ``(N, H, W, C)`` through ``layers``.

    Returns ``(output, caches)``.  For a softmax head the output is the logits.
    ``caches[i]["x"]`` is the input to layer ``i``.
    """
    if training and rng is None:
        rng = np.random.default_rng(0)
    caches = []
    for spec in layers:
        kind = spec["type"]
        cache = {"x": x}
        if kind == "conv":
            name = spec["name"]
            z, cols = _conv_forward(x, params[name + ".kernels"], params[name + ".bias"],
                                    spec["padding"], spec["stride"])
            x = _activate(z, spec["activation"])
            cache["cols"], cache["out"] = cols, x
        elif kind == "maxpool":
            x, cache["idx"] = _maxpool_forward(x, spec["window"])
        elif kind == "avgpool":
            x = _avgpool_forward(x, spec["window"])
        elif kind == "upsample":
            f = spec["factor"]
            x = np.repeat(np.repeat(x, f, axis=1), f, axis=2)
        elif kind == "dropout":
            if training and spec["rate"] > 0:
                keep = rng.random(x.shape) >= spec["rate"]
                mask = keep.astype(x.dtype) / x.dtype.type(1.0 - spec["rate"])
                x = x * mask
                cache["mask"] = mask
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            name = spec["name"]
            x = _activate(x @ params[name + ".weights"].T + params[name + ".bias"],
                          spec["activation"])
            cache["out"] = x
        else:
            raise ArgumentError(f"unknown layer type {kind!r}")
        caches.append(cache)
    return x, caches


def backward(layers, params, caches, grad_out, stop_at=None, input_grad=False):
    """Back-propagate ``grad_out`` (gradient w.r.t. the forward output).

    Returns ``(grads, grad_x)``.  With ``stop_at=i`` propagation halts once the
    gradient w.r.t. the *output* of layer ``i`` is known and that gradient is
    returned as ``grad_x``; parameter gradients of earlier layers are omitted.
    Otherwise ``grad_x`` is the input gradient when ``input_grad`` is set.
    """
    grads = {}
    g = grad_out
    lowest = 0 if stop_at is None else stop_at + 1
    for i in range(len(layers) - 1, lowest - 1, -1):
        spec, cache = layers[i], caches[i]
        kind = spec["type"]
        need_input = i > 0 or input_grad or stop_at is not None
        if kind == "conv":
            name = spec["name"]
            dz = _activation_backward(g, cache["out"], spec["activation"])
            g, grads[name + ".kernels"], grads[name + ".bias"] = _conv_backward(
                dz, cache["cols"], cache["x"].shape, params[name + ".kernels"],
                spec["padding"], spec["stride"], need_input=need_input)
        elif kind == "maxpool":
            g = _maxpool_backward(cache["idx"], g)
        elif kind == "avgpool":
            g = _avgpool_backward(g, spec["window"])
        elif kind == "upsample":
            n, h, w, c = g.shape
            f = spec["factor"]
            g = g.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4))
        elif kind == "dropout":
            if "mask" in cache:
                g = g * cache["mask"]
        elif kind == "flatten":
            g = g.reshape(cache["x"].shape)
        elif kind == "dense":
            name = spec["name"]
            dz = _activation_backward(g, cache["out"], spec["activation"])
            grads[name + ".weights"] = dz.T @ cache["x"]
            grads[name + ".bias"] = dz.sum(axis=0)
            g = dz @ params[name + ".weights"] if need_input else None
    return grads, g
