"""Where FPGNN and Otsu go wrong on low-water dates with bare fields.

Trains on the default 64x64 site with fields on the lowest-quartile dates and
splits each method's errors into field false positives, other false positives
and missed water. Takes about five minutes.
"""

import numpy as np

from hydrocorr import baselines as B
from hydrocorr import fpgnn as F
from hydrocorr import synthgen
from hydrocorr import validation as V
from hydrocorr.raster import to_db


def breakdown(pred, ref, fields):
    return np.array([(pred & ref).sum(), (pred & ~ref & fields).sum(),
                     (pred & ~ref & ~fields).sum(), (~pred & ref).sum()])


def main():
    clean, _ = synthgen.generate_site(synthgen.SiteSpec())
    low = [int(i) for i in np.argsort(clean.elevations, kind="stable")[: len(clean) // 4]]
    series = synthgen.inject_confounders(clean, "bare_fields", low, seed=0)
    refs = [s["REF_WATER"].values > 0.5 for s in series.scenes]
    fields = [a["VH"].values != b["VH"].values for a, b in zip(series.scenes, clean.scenes)]

    model, reports = F.train(series, F.TrainConfig(), seed=0)
    softs = F.infer_series(model, series.scenes)
    rows = V.threshold_sweep(softs, [(s["REF_WATER"], None) for s in series.scenes],
                             F.DEFAULT_THRESHOLDS)
    t = V.best_threshold(rows).threshold
    print(f"trained {len(reports)} epochs, threshold {t:.2f}")

    preds = {"fpgnn": [F.harden(s, t).values > 0.5 for s in softs]}
    for band in ("VV", "VH"):
        preds[f"otsu {band}"] = [B.otsu_segment(to_db(s[band])).values > 0.5
                                 for s in series.scenes]
    print(f"{'method':10s} {'TP':>6s} {'FP field':>9s} {'FP other':>9s} {'FN':>6s} {'IoU water':>10s}")
    for name, masks in preds.items():
        counts = sum(breakdown(masks[i], refs[i], fields[i]) for i in low)
        iou = np.mean([V.class_iou(masks[i], refs[i]) for i in low])
        print(f"{name:10s} {counts[0]:6d} {counts[1]:9d} {counts[2]:9d} {counts[3]:6d} {iou:10.3f}")


if __name__ == "__main__":
    main()
