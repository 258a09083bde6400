"""Neural-network building blocks: convolution, pooling, activations,
normalization, linear projection, and nearest-neighbor upsampling.

Every layer owns float64 parameter tensors and supplies exact backward
rules through the tape in :mod:`cardioseg.tensor`. Weights use Glorot
uniform initialization (+-sqrt(6/(fan_in+fan_out))); biases start at zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

__all__ = [
    "Conv2d",
    "Linear",
    "LayerNorm",
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "relu",
    "sigmoid",
    "softmax",
    "glorot_uniform",
]


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- activations --------------------------------------------------------------


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    # np.maximum (not where) so NaN propagates to the finiteness checks.
    return apply_op(np.maximum(x.data, 0.0), (x,), backward)


def sigmoid(x):
    # Stable split form keeps exp arguments non-positive.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return apply_op(out_data, (x,), backward)


def softmax(x, axis=-1):
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_data,)

    return apply_op(out_data, (x,), backward)


# -- convolution ---------------------------------------------------------------


def _im2col(xp, kh, kw, stride, out_h, out_w):
    c = xp.shape[0]
    col = np.empty((c, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xp[:, i:i + stride * out_h:stride,
                              j:j + stride * out_w:stride]
    return col


def conv2d(x, weight, bias, stride=1, padding="same"):
    """Cross-correlation of x (C,H,W) with weight (O,C,kH,kW) plus bias (O,)."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be C,H,W; got {x.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[0] != in_ch:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {in_ch}"
        )
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding requires odd kernel extents")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    _, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    out_h = (h + 2 * ph - kh) // stride + 1
    out_w = (w + 2 * pw - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    col = _im2col(xp, kh, kw, stride, out_h, out_w)
    col_mat = col.reshape(in_ch * kh * kw, out_h * out_w)
    w_mat = weight.data.reshape(out_ch, in_ch * kh * kw)
    out_data = (w_mat @ col_mat).reshape(out_ch, out_h, out_w) \
        + bias.data[:, None, None]

    def backward(g):
        g_mat = g.reshape(out_ch, out_h * out_w)
        d_bias = g.sum(axis=(1, 2))
        d_weight = (g_mat @ col_mat.T).reshape(weight.shape)
        d_col = (w_mat.T @ g_mat).reshape(in_ch, kh, kw, out_h, out_w)
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, i:i + stride * out_h:stride,
                     j:j + stride * out_w:stride] += d_col[:, i, j]
        d_x = d_xp[:, ph:ph + h, pw:pw + w]
        return d_x, d_weight, d_bias

    return apply_op(out_data, (x, weight, bias), backward)


def maxpool2d(x, window=2, stride=2):
    """2x2/stride-2 max pooling; gradient goes to the first max per window."""
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 stride-2 pooling is supported")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}x{w} (no pad policy)")
    # Window cells ordered row-major so argmax ties break to the lowest index.
    windows = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    flat = windows.reshape(c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], -1)
        return (gflat.reshape(c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return apply_op(out_data, (x,), backward)


def upsample2x(x):
    """Nearest-neighbor doubling of the two trailing spatial extents."""
    c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return apply_op(out_data, (x,), backward)


# -- parameterized layers -------------------------------------------------------


class Conv2d:
    """2-D convolution layer (cross-correlation) with zero 'same' padding."""

    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 stride=1, padding="same"):
        k = int(kernel_size)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * k * k
        fan_out = out_channels * k * k
        self.weight = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, k, k), fan_in, fan_out),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_params(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class Linear:
    """Affine map on the trailing axis: y = x @ W.T + b."""

    def __init__(self, in_features, out_features, rng):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            glorot_uniform(rng, (out_features, in_features), in_features, out_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear expects trailing extent {self.in_features}, got {x.shape}"
            )
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_features)) if x.ndim != 2 else x
        out = flat @ self.weight.transpose((1, 0)) + self.bias
        if x.ndim != 2:
            out = out.reshape(lead + (self.out_features,))
        return out

    def named_params(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class LayerNorm:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""

    def __init__(self, normalized_length, eps=1e-5):
        self.normalized_length = normalized_length
        self.eps = eps
        self.gamma = Tensor(np.ones(normalized_length), requires_grad=True)
        self.beta = Tensor(np.zeros(normalized_length), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.normalized_length:
            raise ShapeError(
                f"layernorm expects trailing extent {self.normalized_length}, "
                f"got {x.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.gamma + self.beta

    def named_params(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta
