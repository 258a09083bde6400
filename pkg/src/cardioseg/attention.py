"""Attention blocks.

Two families live here: the convolutional dual attention used on skip
connections (a channel gate and a spatial gate, both sigmoid-bounded, derived
from a 1x1 fusion of encoder and decoder features) and the multi-head
self-attention used inside transformer layers.
"""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Linear, relu, sigmoid, softmax
from .tensor import ShapeError, concat, matmul

__all__ = [
    "ChannelAttention",
    "SpatialAttention",
    "DualAttention",
    "MultiHeadSelfAttention",
]


class ChannelAttention:
    """Per-channel sigmoid gate from pooled spatial descriptors.

    A single two-layer MLP (shared weights) maps both the average-pooled and
    the max-pooled descriptor; the two outputs are summed before the sigmoid.
    """

    def __init__(self, channels, rng, reduction=4):
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x):
        avg = x.mean(axis=(1, 2))
        mx = x.max(axis=(1, 2))
        gate = sigmoid(self._mlp(avg) + self._mlp(mx))
        return gate.reshape((self.channels, 1, 1))

    def _mlp(self, v):
        return self.fc2(relu(self.fc1(v)))

    def named_params(self, prefix=""):
        yield from self.fc1.named_params(prefix + "fc1.")
        yield from self.fc2.named_params(prefix + "fc2.")


class SpatialAttention:
    """Per-pixel sigmoid gate from the channel-wise mean and max maps."""

    def __init__(self, rng, kernel_size=7):
        self.conv = Conv2d(2, 1, kernel_size, rng)

    def __call__(self, x):
        stats = concat([x.mean(axis=0, keepdims=True),
                        x.max(axis=0, keepdims=True)], axis=0)
        return sigmoid(self.conv(stats))

    def named_params(self, prefix=""):
        yield from self.conv.named_params(prefix + "conv.")


class DualAttention:
    """Gate a feature map with channel and spatial attention computed from a
    1x1 fusion of an encoder feature and a decoder feature.

    mode="sequential" (default): the channel gate scales the target first,
    then the spatial gate is computed from the channel-gated fusion and
    applied on top. mode="product": both gates come straight from the fusion
    and multiply the target jointly. With all gate parameters at zero, both
    modes reduce to exactly 0.25 * target (each sigmoid gate is exactly 0.5).
    """

    def __init__(self, channels, rng, reduction=4, mode="sequential"):
        if mode not in ("sequential", "product"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.channels = channels
        self.mode = mode
        self.fuse = Conv2d(2 * channels, channels, 1, rng)
        self.channel_att = ChannelAttention(channels, rng, reduction)
        self.spatial_att = SpatialAttention(rng)

    def __call__(self, target, enc_feat, dec_feat):
        for name, t in (("enc_feat", enc_feat), ("dec_feat", dec_feat)):
            if t.shape != target.shape:
                raise ShapeError(
                    f"{name} shape {t.shape} must match target {target.shape}"
                )
        fused = self.fuse(concat([enc_feat, dec_feat], axis=0))
        cgate = self.channel_att(fused)
        if self.mode == "sequential":
            sgate = self.spatial_att(cgate * fused)
            return sgate * (cgate * target)
        sgate = self.spatial_att(fused)
        return sgate * cgate * target

    def named_params(self, prefix=""):
        yield from self.fuse.named_params(prefix + "fuse.")
        yield from self.channel_att.named_params(prefix + "channel.")
        yield from self.spatial_att.named_params(prefix + "spatial.")


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention over a token sequence (T, dim)."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x, return_weights=False):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected tokens (T, {self.dim}), got {x.shape}")
        tokens = x.shape[0]

        def split(t):  # (T, dim) -> (heads, T, head_dim)
            return t.reshape((tokens, self.heads, self.head_dim)).transpose((1, 0, 2))

        q = split(self.q_proj(x))
        k = split(self.k_proj(x))
        v = split(self.v_proj(x))
        scores = matmul(q, k.transpose((0, 2, 1))) / np.sqrt(self.head_dim)
        weights = softmax(scores, axis=-1)
        mixed = matmul(weights, v)  # (heads, T, head_dim)
        out = self.out_proj(
            mixed.transpose((1, 0, 2)).reshape((tokens, self.dim))
        )
        if return_weights:
            return out, weights
        return out

    def named_params(self, prefix=""):
        yield from self.q_proj.named_params(prefix + "q.")
        yield from self.k_proj.named_params(prefix + "k.")
        yield from self.v_proj.named_params(prefix + "v.")
        yield from self.out_proj.named_params(prefix + "out.")
