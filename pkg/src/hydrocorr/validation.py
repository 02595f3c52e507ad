"""Reference water masks and per-class intersection-over-union scoring."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass

import numpy as np

from .baselines import otsu_threshold
from .raster import Grid

logger = logging.getLogger(__name__)

TP, TN, FP, FN, INVALID = 1, 2, 3, 4, 0
# blue, gray, green, red; index 0 (invalid) is white
CONTINGENCY_PALETTE = {
    INVALID: (255, 255, 255),
    TP: (31, 119, 180),
    TN: (160, 160, 160),
    FP: (44, 160, 44),
    FN: (214, 39, 40),
}
IOU_CSV_HEADER = ("date", "threshold", "iou_water", "iou_nonwater", "valid_fraction")


def _bool(mask) -> np.ndarray:
    if isinstance(mask, Grid):
        mask = mask.values
    return np.asarray(mask) > 0.5


def _as_mask(b: np.ndarray) -> Grid:
    return Grid(b.astype(np.float32))


def roi_mask(shape, roi=None) -> np.ndarray:
    """Boolean rectangle ``(row0, col0, row1, col1)``, end-exclusive; all True if None."""
    out = np.zeros(shape, dtype=bool)
    if roi is None:
        out[:] = True
    else:
        r0, c0, r1, c1 = roi
        out[r0:r1, c0:c1] = True
    return out


def dtm_water_mask(dtm: Grid, elevation_asl: float, roi=None):
    """Water where terrain lies strictly below the water surface.

    Returns ``(water, valid)``; nodata and out-of-ROI pixels are invalid.
    """
    valid = dtm.valid() & np.isfinite(dtm.values) & roi_mask(dtm.shape, roi)
    water = (dtm.values < elevation_asl) & valid
    return _as_mask(water), _as_mask(valid)


def mndwi(green: Grid, swir: Grid) -> Grid:
    g = green.values.astype(np.float64)
    s = swir.values.astype(np.float64)
    if g.shape != s.shape:
        raise ValueError("green and swir shapes differ")
    total = g + s
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(total == 0, 0.0, (g - s) / total)
    return Grid(out)


def mndwi_water_mask(mndwi_grid: Grid, cloud_mask=None, mode="otsu"):
    """Water where the index is at or above a per-image threshold.

    ``mode`` is ``"otsu"`` or a number used as a manual threshold (for
    images whose histogram is not bimodal). Returns ``(water, valid)`` with
    clouds excluded from ``valid``.
    """
    vals = mndwi_grid.values.astype(np.float64)
    valid = mndwi_grid.valid() & np.isfinite(vals)
    if cloud_mask is not None:
        valid &= ~_bool(cloud_mask)
    if mode == "otsu":
        usable = vals[valid]
        if usable.size == 0 or usable.min() == usable.max():
            raise ValueError("MNDWI histogram is degenerate; use a manual threshold")
        threshold = otsu_threshold(usable)
    else:
        threshold = float(mode)
    water = (vals >= threshold) & valid
    return _as_mask(water), _as_mask(valid)


@dataclass(frozen=True)
class MaskPair:
    predicted: Grid
    reference: Grid
    valid: Grid | None = None

    def arrays(self):
        p, r = _bool(self.predicted), _bool(self.reference)
        v = np.ones(p.shape, dtype=bool) if self.valid is None else _bool(self.valid)
        if not p.shape == r.shape == v.shape:
            raise ValueError("mask shapes differ")
        return p, r, v


@dataclass(frozen=True)
class IouReport:
    date: dt.date | None
    iou_water: float
    iou_nonwater: float
    iou_mean: float
    valid_fraction: float


def class_iou(pred: np.ndarray, ref: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1 when both are empty."""
    inter = np.count_nonzero(pred & ref)
    union = np.count_nonzero(pred) + np.count_nonzero(ref) - inter
    return 1.0 if union == 0 else inter / union


def iou(pair: MaskPair, date=None) -> IouReport:
    p, r, v = pair.arrays()
    if not v.any():
        raise ValueError("no valid pixels to score")
    p, r = p[v], r[v]
    w = class_iou(p, r)
    nw = class_iou(~p, ~r)
    return IouReport(date, w, nw, (w + nw) / 2, float(v.mean()))


def contingency_map(pair: MaskPair) -> Grid:
    """Per-pixel codes: 1 TP, 2 TN, 3 FP, 4 FN, 0 invalid."""
    p, r, v = pair.arrays()
    codes = np.select([p & r, ~p & ~r, p & ~r, ~p & r], [TP, TN, FP, FN])
    return Grid(np.where(v, codes, INVALID).astype(np.float32))


def contingency_counts(codes: Grid) -> dict:
    vals = codes.values.astype(int)
    return {k: int(np.count_nonzero(vals == k)) for k in (TP, TN, FP, FN, INVALID)}


def write_contingency_png(codes: Grid, path) -> None:
    """Indexed-colour preview of a contingency map."""
    from PIL import Image

    img = Image.fromarray(codes.values.astype(np.uint8), mode="P")
    palette = []
    for k in range(5):
        palette.extend(CONTINGENCY_PALETTE[k])
    img.putpalette(palette)
    img.save(path)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    iou_water: float
    iou_nonwater: float
    iou_mean: float
    water_pixels: int
    n_dates: int


def threshold_sweep(soft_masks, references, thresholds) -> list[SweepRow]:
    """Harden every soft mask at each threshold and average IoU over dates.

    ``references`` holds ``(reference, valid)`` pairs aligned with
    ``soft_masks``. Dates with no valid pixels are skipped.
    """
    soft_masks, references = list(soft_masks), list(references)
    if not soft_masks or len(soft_masks) != len(references):
        raise ValueError("threshold_sweep needs equal-length, non-empty inputs")
    rows = []
    for t in thresholds:
        reports, water_pixels = [], 0
        for soft, (ref, valid) in zip(soft_masks, references):
            pred = _soft_values(soft) >= np.float32(t)
            pair = MaskPair(_as_mask(pred), ref, valid)
            if valid is not None and not _bool(valid).any():
                continue
            reports.append(iou(pair))
            water_pixels += int(np.count_nonzero(pred))
        if not reports:
            raise ValueError("no date had valid pixels")
        rows.append(SweepRow(
            float(t),
            float(np.mean([r.iou_water for r in reports])),
            float(np.mean([r.iou_nonwater for r in reports])),
            float(np.mean([r.iou_mean for r in reports])),
            water_pixels,
            len(reports),
        ))
    return rows


def _soft_values(x) -> np.ndarray:
    # SoftMask, Grid or bare array
    x = getattr(x, "values", x)
    return x.values if isinstance(x, Grid) else np.asarray(x)


def best_threshold(rows: list[SweepRow], key="iou_water") -> SweepRow:
    """Row with the highest ``key``; ties go to the lower threshold."""
    return max(rows, key=lambda r: (getattr(r, key), -r.threshold))


def write_iou_csv(records, path) -> None:
    """``records``: iterable of ``(date, threshold, IouReport)``; ``date`` may be
    a label such as ``"mean"``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IOU_CSV_HEADER)
        for date, threshold, rep in records:
            label = date.isoformat() if isinstance(date, dt.date) else str(date)
            thr = "" if threshold is None else f"{threshold:.2f}"
            w.writerow([label, thr, f"{rep.iou_water:.6f}", f"{rep.iou_nonwater:.6f}",
                        f"{rep.valid_fraction:.6f}"])


def mean_report(reports, date=None) -> IouReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    return IouReport(
        date,
        float(np.mean([r.iou_water for r in reports])),
        float(np.mean([r.iou_nonwater for r in reports])),
        float(np.mean([r.iou_mean for r in reports])),
        float(np.mean([r.valid_fraction for r in reports])),
    )
