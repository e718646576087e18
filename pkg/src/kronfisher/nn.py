"""Minimal layer zoo with analytic forward/backward passes and Fisher capture.

Each parametric layer records, per batch, the two statistics the Kronecker
machinery consumes: the augmented input ``h_bar`` (bias row of ones appended,
expanded patches for convolutions, normalized activations for norm layers) and
the pre-activation gradient ``s``. Both are stored column-per-position, i.e.
shape ``(rows, batch * spatial_count)``.

Convention: ``backward`` expects the gradient of the *batch-mean* loss (what
:func:`nll_softmax_loss` returns). Captured ``s`` is rescaled by the batch size
so it holds per-sample-loss gradients, the scale at which Fisher statistics are
defined; returned parameter gradients stay at batch-mean scale.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError, ValidationError
from .tensor import SeededRng, as_f64, gaussian_fill

NORM_EPS = 1e-5  # variance damping inside BatchNorm/LayerNorm


class CaptureBuffer:
    """Per-batch (h_bar, s) statistics for one layer."""

    def __init__(self):
        self.h_bar = None
        self.s = None
        self.spatial_count = 1

    def clear(self):
        self.h_bar = None
        self.s = None
        self.spatial_count = 1

    @property
    def ready(self) -> bool:
        return self.h_bar is not None and self.s is not None


def im2col(x, k_h: int, k_w: int, stride: int, padding: int) -> np.ndarray:
    """Expand conv receptive fields into columns.

    Input ``x`` has shape (batch, c_in, H, W); the result has shape
    ``(c_in*k_h*k_w, batch*out_h*out_w)`` where column ``(b, t)`` (batch-major,
    spatial positions row-major) holds the flattened (c, kh, kw) patch at
    location ``t`` of sample ``b``.
    """
    x = as_f64(x)
    if x.ndim != 4:
        raise DimensionError("im2col expects a (batch, c, H, W) tensor")
    b, c, h, w = x.shape
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (w + 2 * padding - k_w) // stride + 1
    if k_h > h + 2 * padding or k_w > w + 2 * padding or out_h <= 0 or out_w <= 0:
        raise DimensionError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]   # (b, c, out_h, out_w, k_h, k_w)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * k_h * k_w, b * out_h * out_w)
    return np.ascontiguousarray(cols), out_h, out_w


def col2im(cols, x_shape, k_h: int, k_w: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add inverse of :func:`im2col`, used for input gradients."""
    b, c, h, w = x_shape
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (w + 2 * padding - k_w) // stride + 1
    patches = cols.reshape(c, k_h, k_w, b, out_h, out_w)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(k_h):
        for j in range(k_w):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                patches[:, i, j].transpose(1, 0, 2, 3)
            )
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


class Layer:
    kind = "base"

    def __init__(self):
        self.capture = CaptureBuffer()
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def init_params(self, rng: SeededRng):
        pass

    def forward(self, x, training: bool):
        raise NotImplementedError

    def backward(self, dy, batch_size: int):
        raise NotImplementedError

    def clone(self) -> "Layer":
        import copy

        dup = copy.copy(self)
        dup.capture = CaptureBuffer()
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.grads = {}
        return dup


class Dense(Layer):
    """Affine layer with weight of shape (out, in+1); bias via input augmentation."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params["weight"] = np.zeros((out_dim, in_dim + 1))

    def init_params(self, rng: SeededRng):
        w = gaussian_fill(rng, (self.out_dim, self.in_dim), std=np.sqrt(2.0 / self.in_dim))
        self.params["weight"] = np.concatenate([w, np.zeros((self.out_dim, 1))], axis=1)

    def forward(self, x, training: bool):
        x = as_f64(x)
        self._in_shape = x.shape  # pre-flatten, so dx flows back to conv stacks
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"dense expects {self.in_dim} inputs, got {x.shape[1]}")
        h_bar = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1).T  # (in+1, B)
        self.capture.clear()
        if training:
            self.capture.h_bar = h_bar
            self.capture.spatial_count = 1
        self._h_bar = h_bar
        return h_bar.T @ self.params["weight"].T  # (B, out)

    def backward(self, dy, batch_size: int):
        dy = as_f64(dy)
        s = dy.T  # (out, B), batch-mean scale
        self.grads["weight"] = s @ self._h_bar.T
        if self.capture.h_bar is not None:
            self.capture.s = s * batch_size
        dx = (self.params["weight"][:, :-1].T @ s).T
        return dx.reshape(self._in_shape)


class Conv2D(Layer):
    """Convolution with weight (c_out, c_in*k_h*k_w + 1); bias via ones row."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, k_h, k_w, stride=1, padding=0):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.k_h, self.k_w = k_h, k_w
        self.stride, self.padding = stride, padding
        self.params["weight"] = np.zeros((c_out, c_in * k_h * k_w + 1))

    def init_params(self, rng: SeededRng):
        fan_in = self.c_in * self.k_h * self.k_w
        w = gaussian_fill(rng, (self.c_out, fan_in), std=np.sqrt(2.0 / fan_in))
        self.params["weight"] = np.concatenate([w, np.zeros((self.c_out, 1))], axis=1)

    def forward(self, x, training: bool):
        x = as_f64(x)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"conv2d expects (B, {self.c_in}, H, W) input")
        self._x_shape = x.shape
        cols, out_h, out_w = im2col(x, self.k_h, self.k_w, self.stride, self.padding)
        h_bar = np.concatenate([cols, np.ones((1, cols.shape[1]))], axis=0)
        self._h_bar = h_bar
        self._out_hw = (out_h, out_w)
        self.capture.clear()
        if training:
            self.capture.h_bar = h_bar
            self.capture.spatial_count = out_h * out_w
        a = self.params["weight"] @ h_bar  # (c_out, B*T)
        b = x.shape[0]
        return a.reshape(self.c_out, b, out_h, out_w).transpose(1, 0, 2, 3)

    def backward(self, dy, batch_size: int):
        dy = as_f64(dy)
        b = self._x_shape[0]
        out_h, out_w = self._out_hw
        s = dy.transpose(1, 0, 2, 3).reshape(self.c_out, b * out_h * out_w)
        self.grads["weight"] = s @ self._h_bar.T
        if self.capture.h_bar is not None:
            self.capture.s = s * batch_size
        dcols = self.params["weight"][:, :-1].T @ s
        return col2im(dcols, self._x_shape, self.k_h, self.k_w, self.stride, self.padding)


class _NormBase(Layer):
    """Shared scale/shift machinery; subclasses fix the normalization axes."""

    def __init__(self, size: int):
        super().__init__()
        self.size = size
        self.params["scale"] = np.ones(size)
        self.params["shift"] = np.zeros(size)

    def _axes_and_view(self, x):
        raise NotImplementedError

    def forward(self, x, training: bool):
        x = as_f64(x)
        axes, to_cols = self._axes_and_view(x)
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        self._x_hat = (x - mu) * self._inv_std
        self._axes = axes
        self._to_cols = to_cols
        self.capture.clear()
        if training:
            self.capture.h_bar = to_cols(self._x_hat)
            self.capture.spatial_count = self._x_hat.size // (x.shape[0] * self.size)
        shape = self._param_shape(x.ndim)
        return self.params["scale"].reshape(shape) * self._x_hat + self.params["shift"].reshape(shape)

    def backward(self, dy, batch_size: int):
        dy = as_f64(dy)
        axes = self._axes
        shape = self._param_shape(dy.ndim)
        reduce_axes = self._param_reduce_axes(dy.ndim)
        self.grads["shift"] = dy.sum(axis=reduce_axes)
        self.grads["scale"] = (dy * self._x_hat).sum(axis=reduce_axes)
        if self.capture.h_bar is not None:
            self.capture.s = self._to_cols(dy) * batch_size
        dx_hat = dy * self.params["scale"].reshape(shape)
        dx = self._inv_std * (
            dx_hat
            - dx_hat.mean(axis=axes, keepdims=True)
            - self._x_hat * (dx_hat * self._x_hat).mean(axis=axes, keepdims=True)
        )
        return dx

    def _param_shape(self, ndim):
        raise NotImplementedError

    def _param_reduce_axes(self, ndim):
        raise NotImplementedError


class BatchNorm(_NormBase):
    """Per-channel batch normalization; statistics always from the current batch."""

    kind = "batchnorm"

    def _axes_and_view(self, x):
        if x.ndim == 2:
            if x.shape[1] != self.size:
                raise DimensionError("batchnorm channel mismatch")
            return (0,), lambda t: t.T.copy()
        if x.ndim == 4:
            if x.shape[1] != self.size:
                raise DimensionError("batchnorm channel mismatch")
            return (0, 2, 3), lambda t: t.transpose(1, 0, 2, 3).reshape(self.size, -1)
        raise DimensionError("batchnorm expects 2-D or 4-D input")

    def _param_shape(self, ndim):
        return (1, self.size) if ndim == 2 else (1, self.size, 1, 1)

    def _param_reduce_axes(self, ndim):
        return (0,) if ndim == 2 else (0, 2, 3)


class LayerNorm(_NormBase):
    """Per-sample normalization over the feature axis of a 2-D input."""

    kind = "layernorm"

    def _axes_and_view(self, x):
        if x.ndim != 2 or x.shape[1] != self.size:
            raise DimensionError("layernorm expects (B, features) input")
        return (1,), lambda t: t.T.copy()

    def _param_shape(self, ndim):
        return (1, self.size)

    def _param_reduce_axes(self, ndim):
        return (0,)


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("relu", "tanh"):
            raise ValidationError(f"unsupported activation {fn!r}")
        self.fn = fn

    def forward(self, x, training: bool):
        x = as_f64(x)
        self._x = x
        self.capture.clear()
        self._width = x.size // x.shape[0]
        return np.maximum(x, 0.0) if self.fn == "relu" else np.tanh(x)

    def backward(self, dy, batch_size: int):
        if self.fn == "relu":
            return dy * (self._x > 0.0)
        t = np.tanh(self._x)
        return dy * (1.0 - t * t)


class Network:
    """Ordered layer stack with stable integer layer ids."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._forward_done = False
        self._batch_size = 0

    def init_params(self, rng: SeededRng):
        for i, layer in enumerate(self.layers):
            layer.init_params(rng.spawn(i))
        return self

    def forward(self, x, training: bool = False) -> np.ndarray:
        out = as_f64(x)
        if out.shape[0] == 0:
            raise DimensionError("empty batch")
        self._batch_size = out.shape[0]
        for layer in self.layers:
            out = layer.forward(out, training)
        self._forward_done = training
        return out

    def backward(self, dlogits) -> dict[int, dict[str, np.ndarray]]:
        if not self._forward_done:
            raise StateError("backward requires a prior forward with training=True")
        dy = as_f64(dlogits)
        for layer in reversed(self.layers):
            dy = layer.backward(dy, self._batch_size)
        self._forward_done = False
        return {i: dict(layer.grads) for i, layer in enumerate(self.layers) if layer.params}

    def parametric_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.params]

    def get_params(self):
        return {i: {k: v.copy() for k, v in l.params.items()} for i, l in self.parametric_layers()}

    def set_params(self, params):
        for i, layer in self.parametric_layers():
            for key in layer.params:
                layer.params[key] = params[i][key].copy()

    def clone(self) -> "Network":
        return Network([layer.clone() for layer in self.layers])


def nll_softmax_loss(logits, targets):
    """Mean negative log-likelihood under softmax plus its logits gradient.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / batch``.
    """
    logits = as_f64(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError("logits must be (batch, C) with one target per row")
    b, c = logits.shape
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValidationError("target class index out of range")
    # overflow on an already-diverged model yields a non-finite loss, which the
    # caller's NaN guard reports; no need for a warning here
    with np.errstate(over="ignore", invalid="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = -float(log_p[np.arange(b), targets].mean())
        dlogits = np.exp(log_p)
        dlogits[np.arange(b), targets] -= 1.0
        return loss, dlogits / b


def accuracy(logits, targets) -> float:
    preds = np.argmax(as_f64(logits), axis=1)
    return float(np.mean(preds == np.asarray(targets)))


_LAYER_BUILDERS = {
    "dense": lambda spec: Dense(int(spec["in"]), int(spec["out"])),
    "conv2d": lambda spec: Conv2D(
        int(spec["c_in"]), int(spec["c_out"]), int(spec["k_h"]), int(spec["k_w"]),
        int(spec.get("stride", 1)), int(spec.get("padding", 0)),
    ),
    "batchnorm": lambda spec: BatchNorm(int(spec["channels"])),
    "layernorm": lambda spec: LayerNorm(int(spec["features"])),
    "relu": lambda spec: Activation("relu"),
    "tanh": lambda spec: Activation("tanh"),
}


def build_network(layer_specs) -> Network:
    """Construct a Network from a list of {'kind': ..., ...} dictionaries."""
    layers = []
    for spec in layer_specs:
        kind = spec.get("kind")
        if kind not in _LAYER_BUILDERS:
            raise ValidationError(f"unknown layer kind {kind!r}")
        layers.append(_LAYER_BUILDERS[kind](spec))
    return Network(layers)
