"""Segmentation evaluation: overlap (DSC) and boundary distance (Hausdorff).

Overlap is measured per class on binarized masks. Distance is measured
between mask boundaries; an empty boundary makes the distance undefined
(reported as None, never an exception). With pixel spacing attached to the
masks, distances are additionally reported in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CLASS_NAMES",
    "REPORT_ORDER",
    "SegmentationMask",
    "MetricReport",
    "dsc",
    "boundary_points",
    "hausdorff",
    "evaluate",
    "aggregate_reports",
]

# ACDC-style label coding; display order puts LV first, then RV, then LMyo.
CLASS_NAMES = {0: "background", 1: "RV", 2: "LMyo", 3: "LV"}
REPORT_ORDER = (3, 1, 2)


@dataclass
class SegmentationMask:
    """Integer label map (H, W) with optional isotropic-pair pixel spacing."""

    labels: np.ndarray
    spacing: tuple | None = None  # (mm per row step, mm per column step)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            if np.any(self.labels != np.round(self.labels)):
                raise ValueError("labels must be integers")
            self.labels = self.labels.astype(np.int64)
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.spacing is not None:
            self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
            if self.spacing[0] <= 0 or self.spacing[1] <= 0:
                raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.labels.shape

    def binary(self, cls):
        return self.labels == cls


def dsc(x, y):
    """Dice overlap 2|X n Y| / (|X| + |Y|) of two equal-extent binary masks.

    Two empty masks agree vacuously (1.0); exactly one empty gives 0.0.
    """
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"extent mismatch: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def boundary_points(mask):
    """(N, 2) row/col coordinates of foreground pixels touching background.

    A pixel is on the boundary when at least one 4-neighbor is background or
    lies outside the mask.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _directed(x, y, scale):
    diff = (x[:, None, :] - y[None, :, :]) * scale
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return float(dist.min(axis=1).max())


def hausdorff(x, y, mode="symmetric", spacing=None):
    """Hausdorff distance between two point sets of (row, col) coordinates.

    mode="directed" is max over x of the distance to the nearest y;
    "symmetric" is the max of the two directed values. Either set empty
    makes the distance undefined: returns None. ``spacing`` scales each
    axis (e.g. millimetres per pixel step).
    """
    if mode not in ("directed", "symmetric"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    if x.shape[0] == 0 or y.shape[0] == 0:
        return None
    scale = np.ones(2) if spacing is None else np.asarray(spacing, dtype=np.float64)
    if mode == "directed":
        return _directed(x, y, scale)
    return max(_directed(x, y, scale), _directed(y, x, scale))


@dataclass
class MetricReport:
    """Per-class and mean DSC / Hausdorff values for one prediction."""

    dsc_per_class: dict = field(default_factory=dict)
    hd_per_class: dict = field(default_factory=dict)      # pixels, None if undefined
    hd_mm_per_class: dict | None = None                    # only when spacing known
    mean_dsc: float = 0.0
    mean_hd: float | None = None
    mean_hd_mm: float | None = None

    def to_dict(self):
        out = {
            "dsc": {str(k): v for k, v in self.dsc_per_class.items()},
            "hd_pixels": {str(k): v for k, v in self.hd_per_class.items()},
            "mean_dsc": self.mean_dsc,
            "mean_hd_pixels": self.mean_hd,
        }
        if self.hd_mm_per_class is not None:
            out["hd_mm"] = {str(k): v for k, v in self.hd_mm_per_class.items()}
            out["mean_hd_mm"] = self.mean_hd_mm
        return out

    def to_table(self, names=None, order=None):
        """Delimited text table: per-class DSC columns, then HD, then means."""
        names = CLASS_NAMES if names is None else names
        order = [c for c in (REPORT_ORDER if order is None else order)
                 if c in self.dsc_per_class]
        hd = self.hd_mm_per_class if self.hd_mm_per_class is not None \
            else self.hd_per_class
        hd_unit = "mm" if self.hd_mm_per_class is not None else "px"
        mean_hd = self.mean_hd_mm if self.hd_mm_per_class is not None \
            else self.mean_hd

        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        header = ([f"DSC {names.get(c, c)}" for c in order]
                  + [f"HD({hd_unit}) {names.get(c, c)}" for c in order]
                  + ["DSC mean", f"HD({hd_unit}) mean"])
        row = ([fmt(self.dsc_per_class[c]) for c in order]
               + [fmt(hd.get(c)) for c in order]
               + [fmt(self.mean_dsc), fmt(mean_hd)])
        return "\t".join(header) + "\n" + "\t".join(row)


def _mean_or_none(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate(pred: SegmentationMask, truth: SegmentationMask, num_classes=None):
    """Per-class DSC and symmetric boundary Hausdorff for every non-background
    class, plus means. Class count defaults to 1 + the largest label seen."""
    if pred.shape != truth.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {truth.shape}")
    if num_classes is None:
        top = max(int(pred.labels.max(initial=0)), int(truth.labels.max(initial=0)))
        num_classes = max(top + 1, 2)
    spacing = truth.spacing or pred.spacing

    report = MetricReport(hd_mm_per_class={} if spacing else None)
    for cls in range(1, num_classes):
        p, t = pred.binary(cls), truth.binary(cls)
        report.dsc_per_class[cls] = dsc(p, t)
        pb, tb = boundary_points(p), boundary_points(t)
        report.hd_per_class[cls] = hausdorff(pb, tb, "symmetric")
        if spacing:
            report.hd_mm_per_class[cls] = hausdorff(pb, tb, "symmetric", spacing)
    report.mean_dsc = float(np.mean(list(report.dsc_per_class.values())))
    report.mean_hd = _mean_or_none(report.hd_per_class.values())
    if spacing:
        report.mean_hd_mm = _mean_or_none(report.hd_mm_per_class.values())
    return report


def aggregate_reports(reports):
    """Average many per-sample reports into one (HD means skip undefined)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    classes = sorted({c for r in reports for c in r.dsc_per_class})
    has_mm = all(r.hd_mm_per_class is not None for r in reports)
    agg = MetricReport(hd_mm_per_class={} if has_mm else None)
    for cls in classes:
        agg.dsc_per_class[cls] = float(np.mean(
            [r.dsc_per_class[cls] for r in reports if cls in r.dsc_per_class]
        ))
        agg.hd_per_class[cls] = _mean_or_none(
            r.hd_per_class.get(cls) for r in reports
        )
        if has_mm:
            agg.hd_mm_per_class[cls] = _mean_or_none(
                r.hd_mm_per_class.get(cls) for r in reports
            )
    agg.mean_dsc = float(np.mean(list(agg.dsc_per_class.values())))
    agg.mean_hd = _mean_or_none(agg.hd_per_class.values())
    if has_mm:
        agg.mean_hd_mm = _mean_or_none(agg.hd_mm_per_class.values())
    return agg
