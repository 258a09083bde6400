"""Sobel edge priors.

Edge maps are a fixed image-processing step, not a learned one, so everything
here is plain numpy and the results enter the network as constants, never on
the gradient tape. Maps are normalized to [0, 1] per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["EdgeMap", "sobel_magnitude", "avg_pool2x", "edge_pyramid"]

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class EdgeMap:
    """A [0,1] edge-strength map with one leading channel axis."""

    values: np.ndarray  # 1 x H x W
    method: str = "sobel"

    @property
    def shape(self):
        return self.values.shape


def _as_single_channel(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return img


def _correlate3(img, kernel):
    # Both Sobel kernels sum to zero, so the window centre can be subtracted
    # from every tap: a constant image then responds exactly zero instead of
    # accumulating rounding noise that normalization would blow up to 1.
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    centre = padded[1:1 + h, 1:1 + w]
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * (padded[i:i + h, j:j + w] - centre)
    return out


def sobel_magnitude(image, threshold=None):
    """Gradient-magnitude edge map of a grayscale image, scaled to [0, 1].

    Accepts (H, W) or (1, H, W) input and returns an EdgeMap. A flat image
    maps to all zeros. With ``threshold`` set, the map is binarized at that
    level (for ablations).
    """
    img = _as_single_channel(image)
    gx = _correlate3(img, _SOBEL_X)
    gy = _correlate3(img, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    method = "sobel"
    if threshold is not None:
        mag = (mag >= threshold).astype(np.float64)
        method = f"sobel-thresh{threshold:g}"
    return EdgeMap(values=mag[None, :, :], method=method)


def avg_pool2x(image):
    """Halve both extents by averaging 2x2 blocks."""
    h, w = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"extents must be even to pool, got {h}x{w}")
    return image.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def edge_pyramid(image, levels, threshold=None):
    """``levels`` edge maps, full resolution first, each half the previous.

    Level 0 is ``sobel_magnitude(image)``; level k averages 2x2 blocks of
    level k-1 and re-clamps to [0, 1].
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    img = _as_single_channel(image)
    h, w = img.shape
    factor = 2 ** (levels - 1)
    if h % factor or w % factor:
        raise ValueError(
            f"extents {h}x{w} not divisible by 2^{levels - 1} for {levels} levels"
        )
    base = sobel_magnitude(img, threshold)
    maps = [base]
    for _ in range(levels - 1):
        pooled = np.clip(avg_pool2x(maps[-1].values[0]), 0.0, 1.0)
        maps.append(EdgeMap(values=pooled[None, :, :], method=base.method))
    return maps
