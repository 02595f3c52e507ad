"""Command-line pipeline: synth, train, infer, validate, benchmark.

Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 unlearnable data.

A site directory holds ``site.json``, ``gauge.csv``, the ``dtm`` GridStack and
one GridStack per date under ``scenes/``. Prediction directories hold one
GridStack per date, band ``SOFT`` (soft masks) or ``WATER`` (binary masks).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as B
from . import fpgnn as F
from . import synthgen
from . import validation as V
from .autodiff import CheckpointError
from .raster import (Grid, GridStack, RasterError, SceneSeries, pair_scenes,
                     read_gauge_csv, read_gridstack, to_db, write_gauge_csv, write_gridstack)

logger = logging.getLogger("hydrocorr")

EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_UNLEARNABLE = 0, 1, 2, 3
METHODS = ("otsu", "chanvese", "gmm", "spectral")
BENCHMARK_HEADER = ("method", "band", "reference", "class", "iou")
BENCHMARK_DATES_HEADER = ("method", "band", "reference", "date", "iou_water", "iou_nonwater")


class UsageError(ValueError):
    pass


# --- helpers -------------------------------------------------------------------


def _seed_override(default: int) -> int:
    raw = os.environ.get("HYDROCORR_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"HYDROCORR_SEED must be an integer, got {raw!r}") from None


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def parse_thresholds(text: str) -> tuple[float, ...]:
    """``start:stop:step`` (stop inclusive within half a step) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise UsageError("threshold step must be positive")
            count = int(np.floor((stop - start) / step + 0.5)) + 1
            values = [round(start + k * step, 6) for k in range(max(count, 0))]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"cannot parse thresholds {text!r}") from None
    if not values or not all(0 < t < 1 for t in values):
        raise UsageError(f"thresholds {text!r} must be non-empty and lie in (0, 1)")
    return tuple(values)


def _threshold_label(t: float) -> str:
    return f"{t:.2f}"


class Manifest:
    """One ``manifest.json`` per command run."""

    def __init__(self, command: str, out_dir: Path, config_path=None, seed=None):
        self.data = {
            "command": command,
            "config_path": None if config_path is None else str(config_path),
            "seed": seed,
            "inputs": {},
            "outputs": {},
            "tool_version": __version__,
        }
        self.out_dir = out_dir
        self.start = time.perf_counter()

    def write(self, name="manifest.json"):
        self.data["duration_s"] = round(time.perf_counter() - self.start, 3)
        _write_json(self.out_dir / name, self.data)


# --- site directories ---------------------------------------------------------


def _stack_paths(directory: Path):
    return sorted(p for p in directory.glob("*.json") if p.with_suffix(".bin").exists())


def write_site(series: SceneSeries, dtm: Grid, spec_json: dict, out_dir: Path) -> None:
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    for stale in _stack_paths(out_dir / "scenes"):
        stale.unlink()
        stale.with_suffix(".bin").unlink()
    _write_json(out_dir / "site.json", spec_json)
    write_gauge_csv(series.gauge, out_dir / "gauge.csv")
    write_gridstack(GridStack({"DTM": dtm}, series.dates[0], series.scenes[0].crs_note),
                    out_dir / "dtm")
    for stack in series.scenes:
        write_gridstack(stack, out_dir / "scenes" / stack.acquisition_date.isoformat())


def load_site(site_dir, max_gap_days: int = 0):
    """Return ``(series, dtm or None, site dict)`` for a site directory."""
    site_dir = Path(site_dir)
    if not site_dir.is_dir():
        raise FileNotFoundError(f"site directory {site_dir} does not exist")
    meta_path = site_dir / "site.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    gauge = read_gauge_csv(site_dir / "gauge.csv", float(meta.get("gauge_zero", 0.0)))
    paths = _stack_paths(site_dir / "scenes")
    if not paths:
        raise RasterError(f"no scenes under {site_dir / 'scenes'}")
    series = pair_scenes([read_gridstack(p) for p in paths], gauge, max_gap_days)
    dtm = None
    if (site_dir / "dtm.json").exists():
        dtm = read_gridstack(site_dir / "dtm")["DTM"]
    return series, dtm, meta


def _load_predictions(pred_dir: Path) -> dict:
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_dir} does not exist")
    out = {}
    for p in _stack_paths(pred_dir):
        stack = read_gridstack(p)
        out[stack.acquisition_date] = stack
    if not out:
        raise UsageError(f"no predictions in {pred_dir}")
    return out


def _references(series: SceneSeries, dtm: Grid | None, mode: str, gauge_zero: float):
    """``{date: (reference, valid)}`` for the chosen reference ``mode``."""
    refs = {}
    for stack, level in zip(series.scenes, series.elevations):
        if mode == "dtm":
            if dtm is None:
                raise UsageError("dtm mode needs a dtm GridStack in the site directory")
            refs[stack.acquisition_date] = V.dtm_water_mask(dtm, gauge_zero + float(level))
        elif mode == "mndwi":
            cloud = stack["CLOUD"] if "CLOUD" in stack else None
            refs[stack.acquisition_date] = V.mndwi_water_mask(stack["MNDWI"], cloud)
        elif mode == "truth":
            refs[stack.acquisition_date] = (stack["REF_WATER"], None)
        else:
            raise UsageError(f"unknown reference mode {mode!r}")
    return refs


# --- commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    text = Path(args.spec).read_text() if args.spec else "{}"
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise synthgen.SiteSpecError(f"invalid site spec: {exc}") from exc
    if not isinstance(data, dict):
        raise synthgen.SiteSpecError("site spec must be a JSON object")
    confounders = data.pop("confounders", [])
    data["seed"] = _seed_override(int(data.get("seed", 0)))
    spec = synthgen.SiteSpec.from_json(json.dumps(data))
    series, dtm = synthgen.generate_site(spec)
    for k, entry in enumerate(confounders):
        try:
            kind, dates = entry["kind"], entry.get("dates", [])
            seed = int(entry.get("seed", spec.seed + k))
        except (TypeError, KeyError) as exc:
            raise synthgen.SiteSpecError(f"bad confounder entry {entry!r}") from exc
        if dates == "all":
            dates = list(range(len(series)))
        elif dates == "lowest_quartile":
            order = np.argsort(series.elevations, kind="stable")
            dates = [int(i) for i in order[: max(1, len(series) // 4)]]
        else:
            dates = [dt.date.fromisoformat(d) if isinstance(d, str) else int(d) for d in dates]
        series = synthgen.inject_confounders(series, kind, dates, seed,
                                             spec.water_db_mean, spec.land_db_mean,
                                             entry.get("strength"))

    out = Path(args.out_dir)
    manifest = Manifest("synth", out, args.spec, spec.seed)
    meta = dataclasses.asdict(spec)
    meta["confounders"] = confounders
    write_site(series, dtm, meta, out)
    manifest.data["outputs"] = {"scenes": len(series), "site_dir": str(out)}
    manifest.write()
    logger.info("wrote %d scenes to %s", len(series), out)
    return EXIT_OK


def _train_config(path) -> F.TrainConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(data, dict):
        raise UsageError("train config must be a JSON object")
    known = {f.name for f in dataclasses.fields(F.TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown train config keys {unknown}")
    config = F.TrainConfig(**data)
    config.seed = _seed_override(config.seed)
    return config


def cmd_train(args) -> int:
    config = _train_config(args.config)
    series, _, _ = load_site(args.site_dir, args.max_gap_days)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train", out, args.config, config.seed)
    manifest.data["inputs"] = {"site_dir": str(args.site_dir)}

    def progress(report, _model):
        if report.epoch % 10 == 0:
            logger.info("epoch %d train %.4f val %.4f range %.3f", report.epoch,
                        report.train_loss, report.val_loss, report.mask_range)

    model, reports = F.train(series, config, progress=progress)
    model.save(out / "model", config=config)
    F.write_loss_csv(reports, out / "losses.csv")
    train_dates, test_dates = model.split
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "split"])
        rows = [(d, "train") for d in train_dates] + [(d, "test") for d in test_dates]
        for d, which in sorted(rows):
            w.writerow([d.isoformat(), which])
    _write_json(out / "config.json", dataclasses.asdict(config))
    manifest.data["outputs"] = {
        "checkpoint": str(out / "model.json"),
        "losses": str(out / "losses.csv"),
        "split": str(out / "split.csv"),
        "epochs": len(reports),
        "final_val_loss": reports[-1].val_loss,
    }
    manifest.write()
    logger.info("trained %d epochs; final val loss %.4f", len(reports), reports[-1].val_loss)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = F.FpgnnModel.load(args.checkpoint)
    series, _, _ = load_site(args.site_dir, args.max_gap_days)
    thresholds = parse_thresholds(args.thresholds) if args.thresholds else ()
    out = Path(args.out_dir)
    (out / "soft").mkdir(parents=True, exist_ok=True)
    manifest = Manifest("infer", out)
    manifest.data["inputs"] = {"checkpoint": str(args.checkpoint), "site_dir": str(args.site_dir)}
    for stack in series.scenes:
        soft = F.infer(model, stack)
        name = stack.acquisition_date.isoformat()
        write_gridstack(GridStack({"SOFT": soft.values}, stack.acquisition_date, stack.crs_note),
                        out / "soft" / name)
        for t in thresholds:
            write_gridstack(GridStack({"WATER": F.harden(soft, t)}, stack.acquisition_date,
                                      stack.crs_note),
                            out / f"hard_{_threshold_label(t)}" / name)
    manifest.data["outputs"] = {"dates": len(series),
                                "thresholds": [_threshold_label(t) for t in thresholds]}
    manifest.write()
    return EXIT_OK


def _aligned(preds: dict, refs: dict):
    dates = sorted(set(preds) & set(refs))
    if not dates:
        raise UsageError("no prediction date matches a reference date")
    return dates


def cmd_validate(args) -> int:
    series, dtm, meta = load_site(args.site_dir, args.max_gap_days)
    preds = _load_predictions(Path(args.pred_dir))
    refs = _references(series, dtm, args.mode, float(meta.get("gauge_zero", 0.0)))
    dates = _aligned(preds, refs)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    cont_dir = out_csv.parent / f"{out_csv.stem}_contingency"
    cont_dir.mkdir(exist_ok=True)

    soft = "SOFT" in preds[dates[0]]
    threshold = None
    if soft:
        if args.sweep:
            rows = V.threshold_sweep([preds[d]["SOFT"] for d in dates], [refs[d] for d in dates],
                                     parse_thresholds(args.sweep))
            threshold = V.best_threshold(rows).threshold
            with open(cont_dir.parent / f"{out_csv.stem}_sweep.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["threshold", "iou_water", "iou_nonwater", "iou_mean", "n_dates"])
                for r in rows:
                    w.writerow([_threshold_label(r.threshold), f"{r.iou_water:.6f}",
                                f"{r.iou_nonwater:.6f}", f"{r.iou_mean:.6f}", r.n_dates])
        else:
            threshold = args.threshold

    records, reports = [], []
    for d in dates:
        ref, valid = refs[d]
        if valid is not None and not (valid.values > 0.5).any():
            logger.warning("date %s has no valid reference pixels; skipped", d)
            continue
        pred = F.harden(preds[d]["SOFT"], threshold) if soft else preds[d]["WATER"]
        pair = V.MaskPair(pred, ref, valid)
        rep = V.iou(pair, d)
        reports.append(rep)
        records.append((d, threshold, rep))
        codes = V.contingency_map(pair)
        write_gridstack(GridStack({"CONTINGENCY": codes}, d), cont_dir / d.isoformat())
        V.write_contingency_png(codes, cont_dir / f"{d.isoformat()}.png")
    if not reports:
        raise UsageError("no aligned date had valid reference pixels")
    mean = V.mean_report(reports)
    records.append(("mean", threshold, mean))
    V.write_iou_csv(records, out_csv)

    manifest = Manifest("validate", out_csv.parent)
    manifest.data["inputs"] = {"pred_dir": str(args.pred_dir), "site_dir": str(args.site_dir),
                               "mode": args.mode}
    manifest.data["outputs"] = {"csv": str(out_csv), "contingency_dir": str(cont_dir),
                                "threshold": threshold, "dates": len(reports)}
    manifest.write(f"{out_csv.stem}_manifest.json")
    logger.info("mean water IoU %.4f, non-water IoU %.4f over %d dates", mean.iou_water,
                mean.iou_nonwater, len(reports))
    return EXIT_OK


def _segmenter(method: str, seed: int):
    if method == "otsu":
        return B.otsu_segment
    if method == "chanvese":
        return B.chan_vese_segment
    if method == "gmm":
        return lambda g: B.gmm_segment(g, seed=seed)[0]
    if method == "spectral":
        return lambda g: B.spectral_segment(g, B.SpectralConfig(seed=seed))
    raise UsageError(f"unknown method {method!r}; expected some of {METHODS}")


def _parse_methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise UsageError("no benchmark methods given")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected some of {METHODS}")
    return methods


def cmd_benchmark(args) -> int:
    methods = _parse_methods(args.methods)
    bands = ["VV", "VH"] if args.band == "both" else [args.band]
    seed = _seed_override(args.seed)
    series, dtm, meta = load_site(args.site_dir, args.max_gap_days)
    gauge_zero = float(meta.get("gauge_zero", 0.0))
    references = [r for r in args.references.split(",") if r]
    refs = {r: _references(series, dtm, r, gauge_zero) for r in references}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("benchmark", out, seed=seed)
    manifest.data["inputs"] = {"site_dir": str(args.site_dir), "methods": methods,
                               "bands": bands, "references": references}

    runs = []  # (method, band, {date: mask Grid})
    for method in methods:
        segment = _segmenter(method, seed)
        for band in bands:
            masks = {}
            for stack in series.scenes:
                mask = segment(to_db(stack[band]))
                masks[stack.acquisition_date] = mask
                write_gridstack(GridStack({"WATER": mask}, stack.acquisition_date),
                                out / f"{method}_{band}" / stack.acquisition_date.isoformat())
            runs.append((method, band, masks))
            logger.info("%s on %s done", method, band)
    if args.fpgnn_pred:
        preds = _load_predictions(Path(args.fpgnn_pred))
        first = next(iter(preds.values()))
        if "WATER" not in first:
            raise UsageError("--fpgnn-pred must hold hardened masks (band WATER)")
        runs.append(("fpgnn", "VV+VH", {d: s["WATER"] for d, s in preds.items()}))

    summary, per_date = [], []
    for method, band, masks in runs:
        for ref_name, ref in refs.items():
            dates = _aligned(masks, ref)
            reports = []
            for d in dates:
                r, valid = ref[d]
                if valid is not None and not (valid.values > 0.5).any():
                    continue
                rep = V.iou(V.MaskPair(masks[d], r, valid), d)
                reports.append(rep)
                per_date.append((method, band, ref_name, d.isoformat(),
                                 f"{rep.iou_water:.6f}", f"{rep.iou_nonwater:.6f}"))
            mean = V.mean_report(reports)
            summary.append((method, band, ref_name, "water", f"{mean.iou_water:.6f}"))
            summary.append((method, band, ref_name, "non-water", f"{mean.iou_nonwater:.6f}"))
    for name, header, rows in (("benchmark.csv", BENCHMARK_HEADER, summary),
                               ("benchmark_dates.csv", BENCHMARK_DATES_HEADER, per_date)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    manifest.data["outputs"] = {"summary": str(out / "benchmark.csv"),
                                "per_date": str(out / "benchmark_dates.csv")}
    manifest.write()
    return EXIT_OK


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydrocorr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hydrocorr {__version__}")
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    verbosity.add_argument("-v", "--verbose", action="store_true", help="per-epoch debug output")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic site directory")
    s.add_argument("out_dir")
    s.add_argument("--spec", help="SiteSpec JSON (defaults when omitted)")
    s.set_defaults(func=cmd_synth)

    def site_args(sp):
        sp.add_argument("--max-gap-days", type=int, default=0,
                        help="largest scene-to-gauge date gap accepted when pairing")

    t = sub.add_parser("train", help="train FPGNN on a site")
    t.add_argument("site_dir")
    t.add_argument("out_dir")
    t.add_argument("--config", help="TrainConfig JSON")
    site_args(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="soft (and optionally hard) masks for every date")
    i.add_argument("checkpoint")
    i.add_argument("site_dir")
    i.add_argument("out_dir")
    i.add_argument("--thresholds", nargs="?", const="0.1:0.55:0.05",
                   help="start:stop:step or a comma list; bare flag means 0.1:0.55:0.05")
    site_args(i)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("validate", help="IoU of predicted masks against a reference")
    v.add_argument("pred_dir")
    v.add_argument("site_dir")
    v.add_argument("--mode", choices=("dtm", "mndwi", "truth"), default="dtm")
    v.add_argument("--out", default="iou.csv")
    v.add_argument("--threshold", type=float, default=0.5,
                   help="hardening threshold for soft-mask predictions")
    v.add_argument("--sweep", help="pick the soft-mask threshold maximising mean water IoU")
    site_args(v)
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("benchmark", help="run the baseline segmenters")
    b.add_argument("site_dir")
    b.add_argument("out_dir")
    b.add_argument("--methods", default=",".join(METHODS))
    b.add_argument("--band", choices=("VV", "VH", "both"), default="both")
    b.add_argument("--references", default="dtm,mndwi",
                   help="comma list of dtm, mndwi, truth")
    b.add_argument("--fpgnn-pred", help="directory of hardened FPGNN masks to score alongside")
    b.add_argument("--seed", type=int, default=0)
    site_args(b)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except F.UnlearnableSeriesError as exc:
        logger.error("unlearnable series: %s", exc)
        return EXIT_UNLEARNABLE
    except (ValueError, CheckpointError) as exc:
        # RasterError, SiteSpecError, JSONDecodeError and UsageError are ValueErrors
        logger.error("%s", exc)
        return EXIT_INPUT
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
