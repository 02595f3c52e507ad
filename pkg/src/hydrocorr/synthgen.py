"""Synthetic river sites: valley terrain, gauge series, flood truth and SAR/optical bands.

Flooding is pure terrain thresholding, so the flooded area is a monotone
function of the gauge reading by construction. SAR bands are stored as linear
power with multiplicative gamma speckle; MNDWI is a noisy two-level field.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import GaugeSeries, Grid, GridStack, SceneSeries

CONFOUNDERS = ("wind_roughening", "ice_cover", "bare_fields")


class SiteSpecError(ValueError):
    pass


@dataclass
class SiteSpec:
    height: int = 64
    width: int = 64
    profile: str = "V"  # "V" or "U"
    bank_slope: float = 0.15  # m per pixel (V) / m per pixel^2 * u_scale (U)
    river_half_width: float = 3.0
    channel_depth: float = 1.0
    valley_center: float = 0.55  # fraction of width
    along_stream_tilt: float = 0.0  # m per row
    u_scale: float = 12.0
    gauge_zero: float = 100.0
    n_dates: int = 40
    start_date: str = "2019-01-06"
    revisit_days: int = 12
    base_level: float = 1.6
    seasonal_amplitude: float = 1.2
    season_length: int = 30  # dates per seasonal cycle
    level_noise: float = 0.05
    flood_spikes: list = field(default_factory=lambda: [[7, 0.6], [29, 0.8]])
    speckle_looks: int = 5
    water_db_mean: float = -20.0
    land_db_mean: float = -8.0
    land_texture_db: float = 1.0
    vh_offset_db: float = -6.0
    optical_contrast: float = 0.5
    optical_noise: float = 0.1
    cloud_fraction: float = 0.0
    crs_note: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.water_db_mean < self.land_db_mean:
            raise SiteSpecError("water_db_mean must be below land_db_mean (water is darker)")
        if self.river_half_width < 2:
            raise SiteSpecError("river_half_width must be at least 2 pixels")
        if self.height < 8 or self.width < 8:
            raise SiteSpecError("site must be at least 8x8 pixels")
        if self.profile not in ("V", "U"):
            raise SiteSpecError(f"unknown valley profile {self.profile!r}")
        if self.n_dates < 1 or self.speckle_looks < 1 or self.revisit_days < 1:
            raise SiteSpecError("n_dates, speckle_looks and revisit_days must be >= 1")
        if self.bank_slope <= 0:
            raise SiteSpecError("bank_slope must be positive")
        if not 0 <= self.cloud_fraction < 1:
            raise SiteSpecError("cloud_fraction must lie in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> SiteSpec:
        try:
            data = json.loads(text)
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SiteSpecError):
                raise
            raise SiteSpecError(f"invalid site spec: {exc}") from exc


def valley_dtm(spec: SiteSpec) -> np.ndarray:
    """Terrain in meters above sea level; the bank toe sits at gauge zero."""
    rows, cols = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    center = spec.valley_center * (spec.width - 1)
    excess = np.abs(cols - center) - spec.river_half_width
    if spec.profile == "V":
        rise = spec.bank_slope * excess
    else:
        rise = spec.bank_slope * excess**2 / spec.u_scale
    dtm = np.where(excess <= 0, -spec.channel_depth, rise)
    return spec.gauge_zero + dtm + spec.along_stream_tilt * rows


def gauge_levels(spec: SiteSpec, rng) -> np.ndarray:
    t = np.arange(spec.n_dates)
    levels = spec.base_level + spec.seasonal_amplitude * np.sin(2 * np.pi * t / spec.season_length)
    levels = levels + rng.normal(0.0, spec.level_noise, spec.n_dates)
    for idx, mag in spec.flood_spikes:
        if 0 <= idx < spec.n_dates:
            levels[int(idx)] += mag
    return levels


def _speckled(db, looks, rng):
    return (10.0 ** (db / 10.0)) * rng.gamma(looks, 1.0 / looks, size=db.shape)


def generate_site(spec: SiteSpec):
    """Return ``(series, dtm)`` for ``spec``; bit-identical for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dtm = valley_dtm(spec)
    levels = gauge_levels(spec, rng)
    texture = ndimage.gaussian_filter(rng.normal(size=dtm.shape), 2.0)
    texture *= spec.land_texture_db / max(texture.std(), 1e-12)

    start = dt.date.fromisoformat(spec.start_date)
    dates = [start + dt.timedelta(days=spec.revisit_days * k) for k in range(spec.n_dates)]
    scenes = []
    for date, level in zip(dates, levels):
        water = dtm < spec.gauge_zero + level
        vv_db = np.where(water, spec.water_db_mean, spec.land_db_mean + texture)
        vv = _speckled(vv_db, spec.speckle_looks, rng)
        vh = _speckled(vv_db + spec.vh_offset_db, spec.speckle_looks, rng)
        mndwi = np.where(water, spec.optical_contrast, -spec.optical_contrast)
        mndwi = np.clip(mndwi + rng.normal(0.0, spec.optical_noise, dtm.shape), -1, 1)
        bands = {
            "VV": Grid(vv),
            "VH": Grid(vh),
            "MNDWI": Grid(mndwi),
            "REF_WATER": Grid(water.astype(np.float32)),
        }
        if spec.cloud_fraction > 0:
            cloud = _cloud_mask(dtm.shape, spec.cloud_fraction, rng)
            bands["CLOUD"] = Grid(cloud.astype(np.float32))
            haze = rng.normal(0.1, 0.2, dtm.shape)
            bands["MNDWI"] = Grid(np.where(cloud, np.clip(haze, -1, 1), mndwi))
        scenes.append(GridStack(bands, date, spec.crs_note))
    gauge = GaugeSeries(tuple(zip(dates, levels.tolist())), spec.gauge_zero)
    return SceneSeries(tuple(scenes), gauge), Grid(dtm)


def _cloud_mask(shape, fraction, rng):
    h, w = shape
    side_h = max(1, int(round(h * np.sqrt(fraction))))
    side_w = max(1, int(round(h * w * fraction / side_h)))
    side_w = min(side_w, w)
    r = rng.integers(0, h - side_h + 1)
    c = rng.integers(0, w - side_w + 1)
    mask = np.zeros(shape, dtype=bool)
    mask[r:r + side_h, c:c + side_w] = True
    return mask


def _scene_indices(series: SceneSeries, dates):
    lookup = {d: i for i, d in enumerate(series.dates)}
    out = []
    for d in dates:
        if isinstance(d, (int, np.integer)):
            if not 0 <= d < len(series):
                raise ValueError(f"scene index {d} outside series")
            out.append(int(d))
        else:
            if d not in lookup:
                raise ValueError(f"date {d} not in series")
            out.append(lookup[d])
    return sorted(set(out))


def inject_confounders(series: SceneSeries, kind: str, dates, seed: int,
                       water_db_mean: float = -20.0, land_db_mean: float = -8.0,
                       strength: float | None = None) -> SceneSeries:
    """Corrupt the SAR bands of the selected scenes; REF_WATER is untouched.

    ``dates`` holds scene indices or dates. ``strength`` is kind-specific:

    * wind_roughening: fraction of the water-land dB gap added to water (0.6).
    * ice_cover: dB above land reached by frozen water (2.0); each date freezes
      a random 50-100% of the water in 8x8 blocks.
    * bare_fields: fraction of the gap removed from VH over bare land patches
      (0.9); VV loses half as much, since harvested fields lose the volume
      scattering that dominates the cross-polarised return. Each date gets 4-8
      rectangular fields of 8-16 px sides at least 3 px from the water.
    """
    if kind not in CONFOUNDERS:
        raise ValueError(f"unknown confounder {kind!r}; expected one of {CONFOUNDERS}")
    idx = _scene_indices(series, dates)
    if not idx:
        return series
    rng = np.random.default_rng([seed, CONFOUNDERS.index(kind)])
    gap = land_db_mean - water_db_mean
    scenes = list(series.scenes)
    for i in idx:
        stack = scenes[i]
        water = stack["REF_WATER"].values > 0.5
        h, w = water.shape
        shift_db = np.zeros((h, w))
        vv_share = 1.0
        if kind == "wind_roughening":
            shift_db[water] = (0.6 if strength is None else strength) * gap
        elif kind == "ice_cover":
            above = 2.0 if strength is None else strength
            frozen_frac = rng.uniform(0.5, 1.0)
            blocks = rng.random((-(-h // 8), -(-w // 8))) < frozen_frac
            frozen = np.kron(blocks, np.ones((8, 8), dtype=bool))[:h, :w] & water
            shift_db[frozen] = gap + above
        else:
            frac = 0.9 if strength is None else strength
            land = ~ndimage.binary_dilation(water, iterations=3)
            fields = np.zeros((h, w), dtype=bool)
            for _ in range(rng.integers(4, 9)):
                ph, pw = rng.integers(8, 17, size=2)
                r, c = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
                fields[r:r + ph, c:c + pw] = True
            shift_db[fields & land] = -frac * gap
            vv_share = 0.5
        shares = {"VV": vv_share, "VH": 1.0}
        bands = {
            name: Grid(stack[name].values * 10.0 ** (shares[name] * shift_db / 10.0),
                       stack[name].nodata)
            for name in ("VV", "VH") if name in stack
        }
        scenes[i] = stack.with_bands(**bands)
    return series.replace_scenes(scenes)
