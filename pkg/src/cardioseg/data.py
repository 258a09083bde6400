"""Dataset plumbing: 3D-to-2D slicing, normalization, resampling, k-fold
splits, dataset manifests, and 8-bit PNG import/export.

Images are min-max normalized to [0, 1] and bilinearly resampled with
corner alignment; label masks use nearest-neighbor resampling so no new
labels can appear. Everything is float64 internally; PNG export quantizes
to 8 bits for inspection only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .metrics import SegmentationMask
from .tensor import Tensor

__all__ = [
    "SliceSample",
    "normalize_image",
    "resize_bilinear",
    "resize_nearest",
    "normalize_resize",
    "resize_mask",
    "slice_volume",
    "kfold_split",
    "write_manifest",
    "read_manifest",
    "save_grayscale_png",
    "load_grayscale_png",
    "save_mask_png",
    "load_mask_png",
    "MASK_PALETTE",
]

# Fixed display colors per class: RV red, LMyo green, LV blue.
MASK_PALETTE = {0: (0, 0, 0), 1: (231, 76, 60), 2: (46, 204, 113), 3: (52, 152, 219)}


@dataclass
class SliceSample:
    """One 2-D training sample with provenance back to its source volume."""

    image: Tensor                      # 1 x H x W, values in [0, 1]
    mask: SegmentationMask
    volume_id: str = ""
    slice_index: int = 0
    phase: str = ""                    # "ED", "ES", or empty when unknown

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image extents {self.image.shape[1:]} != mask {self.mask.shape}"
            )


def normalize_image(img):
    """Min-max scale to [0, 1]; a constant image becomes all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _source_coords(dst, src):
    if dst == 1:
        return np.zeros(1)
    return np.arange(dst) * ((src - 1) / (dst - 1))


def resize_bilinear(img, target):
    """Corner-aligned bilinear resampling of a 2-D array."""
    img = np.asarray(img, dtype=np.float64)
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be positive, got {target}")
    sh, sw = img.shape
    if (sh, sw) == (th, tw):
        return img.copy()
    ys = _source_coords(th, sh)
    xs = _source_coords(tw, sw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(arr, target):
    """Corner-aligned nearest-neighbor resampling (for label maps)."""
    arr = np.asarray(arr)
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be positive, got {target}")
    sh, sw = arr.shape
    ys = np.rint(_source_coords(th, sh)).astype(int)
    xs = np.rint(_source_coords(tw, sw)).astype(int)
    return arr[np.ix_(ys, xs)]


def normalize_resize(img, target):
    """Normalized, resampled image as a (1, H, W) tensor in [0, 1]."""
    out = resize_bilinear(normalize_image(img), target)
    # Bilinear interpolation of values in [0,1] stays in [0,1] up to rounding.
    return Tensor(np.clip(out, 0.0, 1.0)[None, :, :])


def resize_mask(mask: SegmentationMask, target):
    return SegmentationMask(
        labels=resize_nearest(mask.labels, target), spacing=mask.spacing
    )


def slice_volume(volume):
    """(index, 2-D array) pairs along the volume's third axis.

    Slices are returned row-major as (ny, nx) images. A 2-D volume yields a
    single slice; a 4-D volume is sliced at its first time frame.
    """
    data = volume.data
    if data.ndim == 2:
        return [(0, data.T.copy())]
    if data.ndim == 4:
        data = data[..., 0]
    return [(k, data[:, :, k].T.copy()) for k in range(data.shape[2])]


def kfold_split(ids, k, seed):
    """Deterministic k folds: (train, validation) id lists per fold.

    Validation folds partition the ids; sizes differ by at most one.
    """
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds dataset size {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    for i in range(k):
        val = shuffled[i::k]
        val_set = set(range(i, len(ids), k))
        train = [s for j, s in enumerate(shuffled) if j not in val_set]
        folds.append((train, val))
    return folds


# -- manifests ----------------------------------------------------------------


def write_manifest(path, samples, meta=None):
    """JSON manifest listing sample records plus free-form metadata."""
    doc = {"meta": meta or {}, "samples": list(samples)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "samples" not in doc:
        raise ValueError(f"{path}: not a dataset manifest (no 'samples' key)")
    return doc


# -- PNG I/O --------------------------------------------------------------------


def save_grayscale_png(img01, path):
    """Write a [0,1] float image as 8-bit grayscale."""
    arr = np.asarray(img01, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="L").save(path, format="PNG")


def load_grayscale_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_mask_png(labels, path):
    """Write an integer label map as an indexed-color PNG."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 255:
        raise ValueError("more than 256 classes cannot be index-encoded")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = []
    for i in range(256):
        palette.extend(MASK_PALETTE.get(i, (i, i, i)))
    im.putpalette(palette)
    im.save(path, format="PNG")


def load_mask_png(path):
    with Image.open(path) as im:
        if im.mode != "P":
            im = im.convert("P")
        return np.asarray(im, dtype=np.int64)
