"""The segmentation network.

A U-shaped encoder/decoder: each encoder level is a two-conv residual block
followed by 2x2 max pooling; the pooled deepest feature runs through a
transformer stack (patch embedding, self-attention layers, back to a map via
a 1x1 adaptation conv and nearest upsampling); each decoder level upsamples,
convolves, gates the matching encoder feature with dual attention, fuses in
that level's edge-prior channel, and convolves again. A 1x1 head emits
per-pixel class logits at full input resolution.

Optionally a small residual transformer block follows every encoder level
(``vit_placement="interleaved"``) in addition to the bottleneck stack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import DualAttention
from .layers import Conv2d, maxpool2d, relu, upsample2x
from .tensor import ShapeError, Tensor, concat
from .vit import PatchEmbedding, ViTLayer, tokens_to_map

__all__ = [
    "NetworkConfig",
    "ResidualConvBlock",
    "PatchTransformer",
    "EdgeAttentionUNet",
    "count_parameters",
]


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; ``validate()`` enforces invariants."""

    height: int = 64
    width: int = 64
    in_channels: int = 1
    num_classes: int = 4
    depth: int = 3
    base_channels: int = 16
    vit_layers: int = 4
    embed_dim: int = 128
    heads: int = 4
    patch_size: int = 2
    vit_placement: str = "bottleneck"
    dam_mode: str = "sequential"
    edge_fusion: str = "concat"

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        scale = 2 ** self.depth
        if self.height <= 0 or self.width <= 0 \
                or self.height % scale or self.width % scale:
            raise ValueError(
                f"extents {self.height}x{self.width} must be positive and "
                f"divisible by 2^depth = {scale} (odd extents are rejected, "
                "not padded)"
            )
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.vit_layers < 1:
            raise ValueError("vit_layers must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        p = self.patch_size
        if p < 1 or (p & (p - 1)):
            raise ValueError(f"patch_size must be a power of two, got {p}")
        bh, bw = self.height // scale, self.width // scale
        if bh % p or bw % p:
            raise ValueError(
                f"bottleneck extents {bh}x{bw} not divisible by patch_size {p}"
            )
        for name, value, allowed in (
            ("vit_placement", self.vit_placement, ("bottleneck", "interleaved")),
            ("dam_mode", self.dam_mode, ("sequential", "product")),
            ("edge_fusion", self.edge_fusion, ("concat", "multiply")),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d).validate()

    def channels_at(self, level):
        """Encoder channel count at a level; doubles per level."""
        return self.base_channels * (2 ** level)


class ResidualConvBlock:
    """conv 3x3 -> ReLU -> conv 3x3, plus an additive shortcut.

    The shortcut is the identity when channel counts match, otherwise a 1x1
    adaptation conv. No activation follows the sum, so a zeroed conv branch
    leaves exactly the (adapted) input.
    """

    def __init__(self, in_channels, out_channels, rng):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.adapt = (Conv2d(in_channels, out_channels, 1, rng)
                      if in_channels != out_channels else None)

    def __call__(self, x):
        branch = self.conv2(relu(self.conv1(x)))
        shortcut = self.adapt(x) if self.adapt is not None else x
        return branch + shortcut

    def named_params(self, prefix=""):
        yield from self.conv1.named_params(prefix + "conv1.")
        yield from self.conv2.named_params(prefix + "conv2.")
        if self.adapt is not None:
            yield from self.adapt.named_params(prefix + "adapt.")


class PatchTransformer:
    """Transformer over p x p patches of a feature map, returned as a map.

    Tokens: patch embedding with learned positions; ``layers`` encoder
    layers; a 1x1 conv adapts embeddings back to ``out_channels``; nearest
    upsampling restores the input resolution. With ``residual=True`` the
    input is added back (used for the per-level interleaved blocks so an
    untrained block starts near the identity).
    """

    def __init__(self, channels, out_channels, height, width, dim, heads,
                 layers, patch, rng, residual=False):
        if height % patch or width % patch:
            raise ShapeError(
                f"extents {height}x{width} not divisible by patch {patch}"
            )
        self.grid_h, self.grid_w = height // patch, width // patch
        self.upsamples = int(np.log2(patch)) if patch > 1 else 0
        self.residual = residual
        self.embed = PatchEmbedding(channels, patch, dim, self.grid_h,
                                    self.grid_w, rng)
        self.layers = [ViTLayer(dim, heads, rng) for _ in range(layers)]
        self.unembed = Conv2d(dim, out_channels, 1, rng)

    def __call__(self, x):
        tokens = self.embed(x)
        for layer in self.layers:
            tokens = layer(tokens)
        out = self.unembed(tokens_to_map(tokens, self.grid_h, self.grid_w))
        for _ in range(self.upsamples):
            out = upsample2x(out)
        if self.residual:
            out = x + out
        return out

    def named_params(self, prefix=""):
        yield from self.embed.named_params(prefix + "embed.")
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(prefix + f"layer{i}.")
        yield from self.unembed.named_params(prefix + "unembed.")


class EdgeAttentionUNet:
    """Full network; ``forward(x, edges)`` maps (in_channels, H, W) plus an
    edge pyramid to (num_classes, H, W) logits.

    The edge pyramid must hold ``depth + 1`` levels (full resolution first);
    decoder levels consume levels 0..depth-1. Level ``depth`` matches the
    bottleneck resolution and is accepted for interface symmetry but not
    wired in.
    """

    def __init__(self, config: NetworkConfig, rng):
        config.validate()
        self.config = config
        c = config
        chans = [c.channels_at(i) for i in range(c.depth)]
        self.encoder = []
        self.inter_vits = []
        in_ch = c.in_channels
        for i, out_ch in enumerate(chans):
            self.encoder.append(ResidualConvBlock(in_ch, out_ch, rng))
            if c.vit_placement == "interleaved":
                self.inter_vits.append(PatchTransformer(
                    out_ch, out_ch, c.height >> i, c.width >> i, c.embed_dim,
                    c.heads, 1, 2, rng, residual=True,
                ))
            in_ch = out_ch

        bh, bw = c.height >> c.depth, c.width >> c.depth
        self.bottleneck = PatchTransformer(
            chans[-1], chans[-1], bh, bw, c.embed_dim, c.heads,
            c.vit_layers, c.patch_size, rng,
        )

        self.dams = [DualAttention(ch, rng, mode=c.dam_mode) for ch in chans]
        self.up_convs = []
        self.fuse_convs = []
        edge_extra = 1 if c.edge_fusion == "concat" else 0
        for i, ch in enumerate(chans):
            up_in = chans[i + 1] if i + 1 < c.depth else chans[-1]
            self.up_convs.append(Conv2d(up_in, ch, 3, rng))
            self.fuse_convs.append(Conv2d(2 * ch + edge_extra, ch, 3, rng))
        self.head = Conv2d(chans[0], c.num_classes, 1, rng)

    # -- forward -------------------------------------------------------------

    def forward(self, x, edges):
        c = self.config
        if x.shape != (c.in_channels, c.height, c.width):
            raise ShapeError(
                f"input shape {x.shape} does not match configured "
                f"({c.in_channels}, {c.height}, {c.width})"
            )
        if len(edges) != c.depth + 1:
            raise ShapeError(
                f"edge pyramid has {len(edges)} levels, need {c.depth + 1}"
            )

        enc_feats = []
        cur = x
        for i, block in enumerate(self.encoder):
            cur = block(cur).assert_finite(f"encoder block {i}")
            if self.inter_vits:
                cur = self.inter_vits[i](cur).assert_finite(
                    f"interleaved transformer {i}")
            enc_feats.append(cur)
            cur = maxpool2d(cur)

        cur = self.bottleneck(cur).assert_finite("bottleneck transformer")

        for i in reversed(range(c.depth)):
            cur = relu(self.up_convs[i](upsample2x(cur)))
            gated = self.dams[i](enc_feats[i], enc_feats[i], cur)
            edge = self._edge_tensor(edges[i], i)
            if c.edge_fusion == "concat":
                merged = concat([cur, gated, edge], axis=0)
            else:
                merged = concat([cur, gated * edge], axis=0)
            cur = relu(self.fuse_convs[i](merged)).assert_finite(
                f"decoder level {i}")

        return self.head(cur).assert_finite("output head")

    __call__ = forward

    def _edge_tensor(self, edge, level):
        values = getattr(edge, "values", edge)
        want = (1, self.config.height >> level, self.config.width >> level)
        if values.shape != want:
            raise ShapeError(
                f"edge level {level} has shape {values.shape}, need {want}"
            )
        return Tensor(values)

    # -- utilities -------------------------------------------------------------

    def predict_mask(self, logits, spacing=None):
        """Per-pixel argmax (ties go to the lower class index) as a mask."""
        from .metrics import SegmentationMask

        labels = np.argmax(np.asarray(logits.data), axis=0)
        return SegmentationMask(labels=labels, spacing=spacing)

    def named_params(self, prefix=""):
        for i, block in enumerate(self.encoder):
            yield from block.named_params(prefix + f"enc{i}.")
        for i, vit in enumerate(self.inter_vits):
            yield from vit.named_params(prefix + f"inter{i}.")
        yield from self.bottleneck.named_params(prefix + "bottleneck.")
        for i, dam in enumerate(self.dams):
            yield from dam.named_params(prefix + f"dam{i}.")
        for i, conv in enumerate(self.up_convs):
            yield from conv.named_params(prefix + f"up{i}.")
        for i, conv in enumerate(self.fuse_convs):
            yield from conv.named_params(prefix + f"fuse{i}.")
        yield from self.head.named_params(prefix + "head.")


def count_parameters(module):
    """Total element count over a module's named parameters."""
    return sum(t.size for _, t in module.named_params())
