"""Transformer pieces: patch embedding, encoder layer, and the map/token
conversions that let transformer stacks sit inside a convolutional network.

An encoder layer is pre-norm with residual links around both halves:

    mid = x + attention(norm1(x))
    out = mid + mlp(norm2(mid))

so zeroing the attention output projection and the second MLP projection
makes the layer an exact identity.
"""

from __future__ import annotations

import numpy as np

from .attention import MultiHeadSelfAttention
from .layers import LayerNorm, Linear, relu
from .tensor import ShapeError, Tensor

__all__ = ["PatchEmbedding", "ViTLayer", "tokens_to_map"]


class PatchEmbedding:
    """Split (C, H, W) into p x p patches, project each to dim, add learned
    positional embeddings. Token order is row-major over the patch grid."""

    def __init__(self, channels, patch_size, dim, grid_h, grid_w, rng):
        self.channels = channels
        self.patch_size = patch_size
        self.dim = dim
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.proj = Linear(channels * patch_size * patch_size, dim, rng)
        self.pos = Tensor(
            rng.normal(0.0, 0.02, size=(grid_h * grid_w, dim)),
            requires_grad=True,
        )

    def __call__(self, x):
        c, h, w = x.shape
        p = self.patch_size
        if c != self.channels or h != self.grid_h * p or w != self.grid_w * p:
            raise ShapeError(
                f"expected ({self.channels}, {self.grid_h * p}, {self.grid_w * p}) "
                f"input, got {x.shape}"
            )
        patches = (
            x.reshape((c, self.grid_h, p, self.grid_w, p))
            .transpose((1, 3, 0, 2, 4))
            .reshape((self.grid_h * self.grid_w, c * p * p))
        )
        return self.proj(patches) + self.pos

    def named_params(self, prefix=""):
        yield from self.proj.named_params(prefix + "proj.")
        yield prefix + "pos", self.pos


def tokens_to_map(tokens, grid_h, grid_w):
    """Rearrange (grid_h * grid_w, dim) tokens into a (dim, grid_h, grid_w) map."""
    t, dim = tokens.shape
    if t != grid_h * grid_w:
        raise ShapeError(f"{t} tokens do not tile a {grid_h}x{grid_w} grid")
    return tokens.reshape((grid_h, grid_w, dim)).transpose((2, 0, 1))


class ViTLayer:
    """One pre-norm transformer encoder layer on (T, dim) tokens."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp_in = Linear(dim, mlp_ratio * dim, rng)
        self.mlp_out = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x):
        mid = x + self.attn(self.norm1(x))
        return mid + self.mlp_out(relu(self.mlp_in(self.norm2(mid))))

    def named_params(self, prefix=""):
        yield from self.norm1.named_params(prefix + "norm1.")
        yield from self.attn.named_params(prefix + "attn.")
        yield from self.norm2.named_params(prefix + "norm2.")
        yield from self.mlp_in.named_params(prefix + "mlp_in.")
        yield from self.mlp_out.named_params(prefix + "mlp_out.")
