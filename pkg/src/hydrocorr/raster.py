"""Rasters, scene time series and gauge observations, plus their file formats.

A GridStack lives on disk as two files sharing a stem::

    scene.json   {"height", "width", "bands": [{"name", "offset_bytes"}],
                  "date", "crs_note", "nodata"}
    scene.bin    concatenated row-major little-endian float32 planes

Gauge series are CSV files with the header ``date,elevation_m``.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

logger = logging.getLogger(__name__)

BAND_NAMES = ("VV", "VH", "DTM", "MNDWI", "CLOUD", "REF_WATER", "CONTINGENCY", "SOFT", "WATER")
_LE_F32 = np.dtype("<f4")


class RasterError(ValueError):
    """Raised for malformed rasters, headers or series."""


@dataclass(frozen=True, eq=False)
class Grid:
    """A single 2-D float32 plane with an optional nodata sentinel."""

    values: np.ndarray
    nodata: float | None = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 2:
            raise RasterError(f"grid must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid(self) -> np.ndarray:
        """Boolean array, False where the value equals the nodata sentinel."""
        if self.nodata is None:
            return np.ones(self.shape, dtype=bool)
        if math.isnan(self.nodata):
            return ~np.isnan(self.values)
        return self.values != np.float32(self.nodata)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        same_nodata = (self.nodata == other.nodata) or (
            self.nodata is not None
            and other.nodata is not None
            and math.isnan(self.nodata)
            and math.isnan(other.nodata)
        )
        return same_nodata and self.values.tobytes() == other.values.tobytes() and (
            self.shape == other.shape
        )


@dataclass(frozen=True, eq=False)
class GridStack:
    """Named co-registered bands for one acquisition date."""

    bands: Mapping[str, Grid]
    acquisition_date: dt.date
    crs_note: str = ""

    def __post_init__(self):
        if not self.bands:
            raise RasterError("no bands")
        shapes = {g.shape for g in self.bands.values()}
        if len(shapes) != 1:
            raise RasterError(f"band shapes differ: {sorted(shapes)}")
        object.__setattr__(self, "bands", dict(self.bands))

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.bands.values())).shape

    def __getitem__(self, name: str) -> Grid:
        try:
            return self.bands[name]
        except KeyError:
            raise RasterError(f"missing band {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.bands

    def with_bands(self, **bands: Grid) -> GridStack:
        merged = dict(self.bands)
        merged.update(bands)
        return GridStack(merged, self.acquisition_date, self.crs_note)

    def require_sar(self):
        for name in ("VV", "VH"):
            if name not in self.bands:
                raise RasterError(f"missing band {name!r}")

    def __eq__(self, other):
        if not isinstance(other, GridStack):
            return NotImplemented
        return (
            self.acquisition_date == other.acquisition_date
            and self.crs_note == other.crs_note
            and list(self.bands) == list(other.bands)
            and all(self.bands[k] == other.bands[k] for k in self.bands)
        )


@dataclass(frozen=True)
class GaugeSeries:
    """Daily gauge readings (meters above gauge zero)."""

    entries: tuple[tuple[dt.date, float], ...]
    gauge_zero: float = 0.0

    def __post_init__(self):
        entries = tuple((d, float(e)) for d, e in self.entries)
        for d, e in entries:
            if not math.isfinite(e):
                raise RasterError(f"non-finite elevation on {d}")
        for (d0, _), (d1, _) in zip(entries, entries[1:]):
            if d1 <= d0:
                raise RasterError(f"gauge dates not strictly increasing at {d1}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def dates(self) -> list[dt.date]:
        return [d for d, _ in self.entries]

    @property
    def elevations(self) -> np.ndarray:
        return np.array([e for _, e in self.entries], dtype=np.float64)


@dataclass(frozen=True)
class SceneSeries:
    """Scenes paired one-to-one with gauge entries."""

    scenes: tuple[GridStack, ...]
    gauge: GaugeSeries
    pairing: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        scenes = tuple(self.scenes)
        pairing = tuple(self.pairing) or tuple((i, i) for i in range(len(scenes)))
        if len(pairing) != len(scenes) or sorted(p[0] for p in pairing) != list(
            range(len(scenes))
        ):
            raise RasterError("every scene must pair with exactly one gauge entry")
        if len({s.shape for s in scenes}) > 1:
            raise RasterError("scenes differ in shape")
        for _, g in pairing:
            if not 0 <= g < len(self.gauge):
                raise RasterError(f"gauge index {g} out of range")
        object.__setattr__(self, "scenes", scenes)
        object.__setattr__(self, "pairing", pairing)

    def __len__(self):
        return len(self.scenes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scenes[0].shape

    @property
    def dates(self) -> list[dt.date]:
        return [s.acquisition_date for s in self.scenes]

    @property
    def elevations(self) -> np.ndarray:
        """Gauge readings paired with each scene, in scene order."""
        elev = self.gauge.elevations
        lookup = dict(self.pairing)
        return np.array([elev[lookup[i]] for i in range(len(self.scenes))])

    def subset(self, indices) -> SceneSeries:
        """Series restricted to ``indices`` (scene order follows ``indices``)."""
        lookup = dict(self.pairing)
        scenes = [self.scenes[i] for i in indices]
        return SceneSeries(
            tuple(scenes),
            self.gauge,
            tuple((k, lookup[i]) for k, i in enumerate(indices)),
        )

    def replace_scenes(self, scenes) -> SceneSeries:
        return SceneSeries(tuple(scenes), self.gauge, self.pairing)


# --- GridStack files -------------------------------------------------------


def _stem_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def write_gridstack(stack: GridStack, path) -> None:
    """Write ``stack`` as ``<stem>.json`` + ``<stem>.bin``."""
    if not isinstance(stack, GridStack):
        raise RasterError("expected a GridStack")
    json_path, bin_path = _stem_paths(path)
    nodata = {g.nodata for g in stack.bands.values()}
    nodata.discard(None)
    if len(nodata) > 1:
        raise RasterError("bands carry different nodata sentinels")
    nodata_value = nodata.pop() if nodata else None
    h, w = stack.shape
    plane_bytes = h * w * 4
    header = {
        "height": h,
        "width": w,
        "bands": [
            {"name": name, "offset_bytes": i * plane_bytes}
            for i, name in enumerate(stack.bands)
        ],
        "date": stack.acquisition_date.isoformat(),
        "crs_note": stack.crs_note,
        "nodata": None if nodata_value is None or math.isnan(nodata_value) else nodata_value,
    }
    if nodata_value is not None and math.isnan(nodata_value):
        header["nodata"] = "nan"
    payload = b"".join(
        g.values.astype(_LE_F32, copy=False).tobytes(order="C")
        for g in stack.bands.values()
    )
    json_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(payload)
    json_path.write_text(json.dumps(header, indent=2) + "\n")


def read_gridstack(path) -> GridStack:
    """Read a GridStack written by :func:`write_gridstack`."""
    json_path, bin_path = _stem_paths(path)
    try:
        header = json.loads(json_path.read_text())
        h, w = int(header["height"]), int(header["width"])
        band_specs = [(b["name"], int(b["offset_bytes"])) for b in header["bands"]]
        date = dt.date.fromisoformat(header["date"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RasterError(f"malformed header {json_path}: {exc}") from exc
    if h <= 0 or w <= 0:
        raise RasterError(f"malformed header {json_path}: non-positive shape")
    names = [n for n, _ in band_specs]
    if len(set(names)) != len(names):
        raise RasterError(f"duplicate band names in {json_path}")
    if not band_specs:
        raise RasterError("no bands")
    nodata = header.get("nodata")
    if nodata == "nan":
        nodata = float("nan")
    elif nodata is not None:
        nodata = float(nodata)

    payload = bin_path.read_bytes()
    plane_bytes = h * w * 4
    if len(payload) != plane_bytes * len(band_specs):
        raise RasterError(
            f"payload length {len(payload)} does not match {len(band_specs)} "
            f"band(s) of {h}x{w} float32 ({plane_bytes * len(band_specs)} bytes)"
        )
    bands = {}
    for name, offset in band_specs:
        if offset < 0 or offset + plane_bytes > len(payload):
            raise RasterError(f"band {name!r} offset out of range")
        plane = np.frombuffer(payload, dtype=_LE_F32, count=h * w, offset=offset)
        bands[name] = Grid(plane.reshape(h, w), nodata)
    return GridStack(bands, date, header.get("crs_note", ""))


# --- gauge CSV ---------------------------------------------------------------


def read_gauge_csv(path, gauge_zero: float = 0.0) -> GaugeSeries:
    """Parse a ``date,elevation_m`` CSV; rows may be in any order."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != [
            "date",
            "elevation_m",
        ]:
            raise RasterError(f"{path}: expected header 'date,elevation_m'")
        for lineno, row in enumerate(reader, start=2):
            try:
                date = dt.date.fromisoformat(row["date"].strip())
            except (ValueError, AttributeError) as exc:
                raise RasterError(f"{path}:{lineno}: unparsable date") from exc
            try:
                elev = float(row["elevation_m"])
            except (TypeError, ValueError) as exc:
                raise RasterError(f"{path}:{lineno}: bad elevation") from exc
            if not math.isfinite(elev):
                raise RasterError(f"{path}:{lineno}: non-finite elevation")
            rows.append((date, elev))
    rows.sort(key=lambda r: r[0])
    for (d0, _), (d1, _) in zip(rows, rows[1:]):
        if d0 == d1:
            raise RasterError(f"{path}: duplicate date {d0}")
    return GaugeSeries(tuple(rows), gauge_zero)


def write_gauge_csv(gauge: GaugeSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "elevation_m"])
        for d, e in gauge.entries:
            writer.writerow([d.isoformat(), repr(float(e))])


# --- pairing and unit conversion ----------------------------------------------


def pair_scenes(scenes, gauge: GaugeSeries, max_gap_days: int) -> SceneSeries:
    """Match each scene to the nearest gauge date within ``max_gap_days``.

    Ties go to the earlier gauge date. Unmatched scenes are dropped with a
    warning; an empty result raises.
    """
    scenes = list(scenes)
    if not scenes:
        raise RasterError("no scenes to pair")
    if len({s.shape for s in scenes}) > 1:
        raise RasterError("scenes differ in shape")
    gauge_days = np.array([d.toordinal() for d in gauge.dates])
    kept, pairing = [], []
    for scene in scenes:
        gaps = np.abs(gauge_days - scene.acquisition_date.toordinal())
        j = int(np.argmin(gaps))  # first minimum is the earlier date
        if gaps[j] > max_gap_days:
            logger.warning(
                "scene %s dropped: nearest gauge reading is %d days away",
                scene.acquisition_date,
                gaps[j],
            )
            continue
        pairing.append((len(kept), j))
        kept.append(scene)
    if not kept:
        raise RasterError("no scene matched a gauge reading")
    return SceneSeries(tuple(kept), gauge, tuple(pairing))


def to_db(grid: Grid) -> Grid:
    """Linear power to decibels; nodata pixels pass through."""
    valid = grid.valid()
    vals = grid.values
    if np.any(vals[valid] <= 0) or not np.all(np.isfinite(vals[valid])):
        raise RasterError("to_db needs strictly positive finite values")
    out = vals.astype(np.float64)
    out[valid] = 10.0 * np.log10(out[valid])
    return Grid(out, grid.nodata)


def from_db(grid: Grid) -> Grid:
    valid = grid.valid()
    out = grid.values.astype(np.float64)
    out[valid] = 10.0 ** (out[valid] / 10.0)
    return Grid(out, grid.nodata)
