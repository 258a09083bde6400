"""Synthetic short-axis cardiac phantoms with exact ground truth.

Each phantom is a bright inner disk (LV, class 3) inside an annulus
(myocardium, class 2) with a crescent (RV, class 1) hugging the annulus from
outside; per-class intensity plateaus plus Gaussian noise give the network a
learnable but non-trivial signal. Geometry is jittered per seed under
constraints that keep every structure fully inside the frame and the annulus
at least two pixels thick, so the myocardium always separates the inner disk
from everything else.
"""

from __future__ import annotations

import numpy as np

from .data import SliceSample
from .metrics import SegmentationMask
from .tensor import Tensor

__all__ = ["generate_phantom", "generate_dataset", "INTENSITY"]

INTENSITY = {0: 0.12, 1: 0.55, 2: 0.35, 3: 0.85}
NOISE_SIGMA = 0.04
MAX_TRIES = 100


def _disk(cy, cx, radius, h, w):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _geometry(rng, h, w):
    scale = min(h, w) / 64.0
    r_inner = rng.uniform(6.0, 9.0) * scale
    r_outer = r_inner + rng.uniform(3.0, 5.0) * scale
    r_rv = rng.uniform(5.0, 8.0) * scale
    cy = h / 2 + rng.uniform(-4.0, 4.0) * scale
    cx = w / 2 + rng.uniform(-4.0, 4.0) * scale
    theta = rng.uniform(0.0, 2 * np.pi)
    gap = (r_outer + rng.uniform(0.2, 0.6) * r_rv)
    rv_cy = cy + gap * np.sin(theta)
    rv_cx = cx + gap * np.cos(theta)
    return cy, cx, r_inner, r_outer, rv_cy, rv_cx, r_rv


def _fits(cy, cx, r, h, w):
    return r + 1 <= cy <= h - 2 - r and r + 1 <= cx <= w - 2 - r


def generate_phantom(seed, extents=(64, 64)):
    """One deterministic phantom sample for a seed."""
    h, w = extents
    if h % 2 or w % 2 or h < 32 or w < 32:
        raise ValueError(f"extents must be even and >= 32, got {extents}")
    rng = np.random.default_rng(seed)

    for attempt in range(MAX_TRIES):
        cy, cx, r_in, r_out, rv_cy, rv_cx, r_rv = _geometry(rng, h, w)
        if _fits(cy, cx, r_out, h, w) and _fits(rv_cy, rv_cx, r_rv, h, w):
            break
    else:
        raise RuntimeError(f"no fitting geometry after {MAX_TRIES} tries")

    inner = _disk(cy, cx, r_in, h, w)
    outer = _disk(cy, cx, r_out, h, w)
    rv = _disk(rv_cy, rv_cx, r_rv, h, w) & ~outer

    labels = np.zeros((h, w), dtype=np.int64)
    labels[rv] = 1
    labels[outer & ~inner] = 2
    labels[inner] = 3

    image = np.full((h, w), INTENSITY[0])
    for cls in (1, 2, 3):
        image[labels == cls] = INTENSITY[cls]
    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, (h, w)), 0.0, 1.0)

    return SliceSample(
        image=Tensor(image[None, :, :]),
        mask=SegmentationMask(labels=labels),
        volume_id=f"phantom-{seed}",
        slice_index=0,
        phase="ED" if seed % 2 == 0 else "ES",
    )


def generate_dataset(count, seed, extents=(64, 64)):
    """``count`` phantoms with per-sample seeds derived from ``seed``."""
    return [generate_phantom(seed * 100003 + i, extents) for i in range(count)]
