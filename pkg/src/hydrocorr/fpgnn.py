"""Water-mask network trained against gauge elevations instead of labels.

The network maps a dual-polarisation SAR scene to a per-pixel water
probability. Its only supervision is a correlation loss between the summed
mask area of each scene and the gauge reading on that date: the head weight is
kept nonnegative, so the only way to raise the correlation is to mark the
pixels that flood as the river rises.

Layout (channel widths are configurable, default 16/32/64)::

    conv3x3-relu, conv3x3-relu -> c1 -> avgpool      (H)
    conv3x3-relu, conv3x3-relu -> c2 -> avgpool      (H/2)
    conv3x3-relu, conv3x3-relu -> c3 -> avgpool      (H/4 -> H/8)
    relu(deconv4x4/2) + conv1x1(c3) -> relu(deconv) + conv1x1(c2)
        -> relu(deconv) + conv1x1(c1) -> conv1x1 -> sigmoid   (soft mask)
    global sum pool -> dense (weight >= 0)                    (area)
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import datetime as dt
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LayerParams, Tensor
from .raster import Grid, GridStack, RasterError, SceneSeries

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.10 + 0.05 * k, 2) for k in range(10))
RANGE_FLOOR = 1e-6
VARIANCE_EPS = 1e-8


class UnlearnableSeriesError(ValueError):
    """Gauge readings carry no variance, so the correlation loss is undefined."""


class DegenerateVarianceError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    split_fraction: float = 0.8
    batch_fraction: float = 0.5
    thresholds: tuple = DEFAULT_THRESHOLDS
    patience: int = 20
    max_epochs: int = 500
    range_gate: float = 0.9
    dense_penalty_scale: float = 0.01
    range_weight: float = 10.0
    clip_weight: float = 100.0
    dry_patch: tuple = (0, 0)
    dry_patch_size: int = 6
    stratum_count: int = 4
    channels: tuple = (16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.dry_patch = tuple(int(v) for v in self.dry_patch)
        self.channels = tuple(int(c) for c in self.channels)
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if not all(0 < t < 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1 or self.stratum_count < 1:
            raise ValueError("patience, max_epochs and stratum_count must be >= 1")
        if len(self.channels) != 3:
            raise ValueError("channels needs one width per pooling block")

    def check_dry_patch(self, shape):
        r, c = self.dry_patch
        s = self.dry_patch_size
        if r < 0 or c < 0 or r + s > shape[0] or c + s > shape[1]:
            raise ValueError(f"dry patch {self.dry_patch} (size {s}) does not fit {shape}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_loss: float
    mask_range: float
    reg_terms: tuple

    CSV_HEADER = ("epoch", "train_loss", "val_loss", "mask_range",
                  "dense_penalty", "range_penalty", "clip_variance_penalty")

    def row(self):
        return (self.epoch, repr(self.train_loss), repr(self.val_loss),
                repr(self.mask_range), *(repr(float(v)) for v in self.reg_terms))


def write_loss_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LossReport.CSV_HEADER)
        for r in reports:
            w.writerow(r.row())


@dataclass(frozen=True)
class SoftMask:
    values: Grid
    source_date: dt.date | None = None


@dataclass
class FpgnnModel:
    layers: dict
    band_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    band_std: np.ndarray = field(default_factory=lambda: np.ones(2))
    input_shape: tuple | None = None
    split: tuple | None = None

    FEATURE = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b")
    SKIPS = ("skip1", "skip2", "skip3")
    UPSAMPLE = ("up3", "up2", "up1", "mask_conv")

    def params(self) -> list[LayerParams]:
        return list(self.layers.values())

    @property
    def head(self) -> LayerParams:
        return self.layers["head"]

    @property
    def dtype(self):
        return self.layers["conv1a"].weights.dtype

    def copy(self) -> FpgnnModel:
        return copy.deepcopy(self)

    def save(self, path, adam: ad.AdamState | None = None, config: TrainConfig | None = None):
        extra = {
            "band_mean": [float(v) for v in self.band_mean],
            "band_std": [float(v) for v in self.band_std],
            "input_shape": list(self.input_shape) if self.input_shape else None,
        }
        if config is not None:
            extra["config"] = dataclasses.asdict(config)
        ad.save_checkpoint(path, self.layers, adam, extra)

    @classmethod
    def load(cls, path) -> FpgnnModel:
        layers, _, extra = ad.load_checkpoint(path)
        required = cls.FEATURE + cls.SKIPS + cls.UPSAMPLE + ("head",)
        missing = [k for k in required if k not in layers]
        if missing:
            raise ad.CheckpointError(f"checkpoint lacks layers {missing}")
        try:
            shape = extra.get("input_shape")
            return cls(layers, np.asarray(extra["band_mean"], dtype=np.float64),
                       np.asarray(extra["band_std"], dtype=np.float64),
                       tuple(shape) if shape else None)
        except (KeyError, TypeError, ValueError) as exc:
            raise ad.CheckpointError(f"bad checkpoint extras: {exc}") from exc


def build_model(channels=(16, 32, 64), seed=0, dtype=np.float32, in_bands=2) -> FpgnnModel:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = channels

    def conv(o, i, k=3):
        return LayerParams.init("conv", (o, i, k, k), rng, dtype)

    layers = {
        "conv1a": conv(c1, in_bands), "conv1b": conv(c1, c1),
        "conv2a": conv(c2, c1), "conv2b": conv(c2, c2),
        "conv3a": conv(c3, c2), "conv3b": conv(c3, c3),
        "skip1": conv(1, c1, 1), "skip2": conv(1, c2, 1), "skip3": conv(1, c3, 1),
        "up3": _bilinear_deconv(c3, rng, dtype),
        "up2": _bilinear_deconv(1, rng, dtype),
        "up1": _bilinear_deconv(1, rng, dtype),
        "mask_conv": conv(1, 1, 1),
        "head": LayerParams.init("dense", (1, 1), rng, dtype, constraint="nonnegative"),
    }
    return FpgnnModel(layers)


def bilinear_kernel(size=4) -> np.ndarray:
    f = (size + 1) // 2
    center = f - 1 if size % 2 else f - 0.5
    taps = 1 - np.abs(np.arange(size) - center) / f
    return np.outer(taps, taps)


def _bilinear_deconv(in_ch, rng, dtype):
    """Bilinear upsampling kernel; multi-channel inputs get random He-scaled
    per-channel gains."""
    if in_ch == 1:
        gains = np.ones(1)
    else:
        limit = np.sqrt(6.0 / in_ch)
        gains = rng.uniform(-limit, limit, in_ch)
    w = gains[None, :, None, None] * bilinear_kernel(4)[None, None]
    return LayerParams("transposed_conv", Tensor(w.astype(dtype), True),
                       Tensor(np.zeros(1, dtype=dtype), True))


def network(model: FpgnnModel, x: Tensor) -> tuple[Tensor, Tensor]:
    """Run the graph on normalised input (n, bands, H, W); H, W multiples of 8.

    Returns the soft mask (n, 1, H, W) and the predicted areas (n, 1).
    """
    L = model.layers
    h = ad.relu(ad.conv2d(x, L["conv1a"]))
    c1 = ad.relu(ad.conv2d(h, L["conv1b"]))
    h = ad.relu(ad.conv2d(ad.avg_pool2(c1), L["conv2a"]))
    c2 = ad.relu(ad.conv2d(h, L["conv2b"]))
    h = ad.relu(ad.conv2d(ad.avg_pool2(c2), L["conv3a"]))
    c3 = ad.relu(ad.conv2d(h, L["conv3b"]))
    p3 = ad.avg_pool2(c3)

    u = ad.relu(ad.transposed_conv2(p3, L["up3"]))
    u = ad.add(u, ad.conv2d(c3, L["skip3"]))
    u = ad.relu(ad.transposed_conv2(u, L["up2"]))
    u = ad.add(u, ad.conv2d(c2, L["skip2"]))
    u = ad.relu(ad.transposed_conv2(u, L["up1"]))
    u = ad.add(u, ad.conv2d(c1, L["skip1"]))
    mask = ad.sigmoid(ad.conv2d(u, L["mask_conv"]))
    area = ad.dense(ad.global_sum_pool(mask), L["head"])
    return mask, area


# --- input preparation ---------------------------------------------------------


def _db_bands(stack: GridStack) -> np.ndarray:
    stack.require_sar()
    out = []
    for name in ("VV", "VH"):
        g = stack[name]
        vals = g.values.astype(np.float64)
        valid = g.valid() & np.isfinite(vals) & (vals > 0)
        if not valid.any():
            raise RasterError(f"band {name} of {stack.acquisition_date} has no valid pixels")
        db = np.full(vals.shape, np.nan)
        db[valid] = 10.0 * np.log10(vals[valid])
        out.append(db)
    return np.stack(out)


def padded_shape(shape) -> tuple[int, int]:
    return tuple(-(-s // 8) * 8 for s in shape)


def fit_normalisation(model: FpgnnModel, stacks) -> None:
    """Freeze per-band mean/std of the dB bands over ``stacks``."""
    db = np.stack([_db_bands(s) for s in stacks])
    model.band_mean = np.nanmean(db, axis=(0, 2, 3))
    std = np.nanstd(db, axis=(0, 2, 3))
    model.band_std = np.where(std > 0, std, 1.0)
    model.input_shape = tuple(stacks[0].shape)


def prepare_input(model: FpgnnModel, stacks) -> np.ndarray:
    """dB, standardise, fill nodata with the band mean, edge-pad to a multiple of 8."""
    db = np.stack([_db_bands(s) for s in stacks])
    x = (db - model.band_mean[None, :, None, None]) / model.band_std[None, :, None, None]
    x = np.nan_to_num(x, nan=0.0)
    h, w = x.shape[2:]
    ph, pw = padded_shape((h, w))
    if (ph, pw) != (h, w):
        x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    return x.astype(model.dtype)


# --- loss and regularisers --------------------------------------------------------


def pearson_loss(predicted, observed) -> float:
    """``1 - PCC(predicted, observed)``; raises on zero variance."""
    p = np.asarray(predicted, dtype=np.float64).ravel()
    y = np.asarray(observed, dtype=np.float64).ravel()
    if p.size != y.size or p.size < 2:
        raise ValueError("pearson_loss needs two equal-length vectors with n >= 2")
    a, b = p - p.mean(), y - y.mean()
    saa, sbb = a @ a, b @ b
    if saa == 0 or sbb == 0:
        raise DegenerateVarianceError("zero variance in pearson_loss input")
    return float(1.0 - (a @ b) / np.sqrt(saa * sbb))


def pearson_loss_op(predicted: Tensor, observed, eps=VARIANCE_EPS) -> Tensor:
    """Differentiable ``1 - PCC`` with ``eps`` added under both square roots."""
    p = predicted.data.astype(np.float64).ravel()
    y = np.asarray(observed, dtype=np.float64).ravel()
    a, b = p - p.mean(), y - y.mean()
    saa, sbb, sab = a @ a + eps, b @ b + eps, a @ b
    denom = np.sqrt(saa * sbb)
    r = sab / denom

    def _backward(g):
        dr = b / denom - sab * a / (saa * denom)
        return (-g * dr,)

    return ad.from_op(np.array(1.0 - r), (predicted,), _backward)


def range_penalty_op(mask: Tensor) -> Tensor:
    """``1 / (max - min)`` over the whole batch; constant once the range collapses."""
    x = mask.data
    hi, lo = x.max(), x.min()
    span = float(hi) - float(lo)
    if span < RANGE_FLOOR:
        return ad.from_op(np.array(1.0 / RANGE_FLOOR), (mask,), lambda g: (None,))
    i_hi, i_lo = int(np.argmax(x)), int(np.argmin(x))

    def _backward(g):
        out = np.zeros(x.size)
        coef = float(g) / span**2
        out[i_hi] -= coef
        out[i_lo] += coef
        return (out.reshape(x.shape),)

    return ad.from_op(np.array(1.0 / span), (mask,), _backward)


def patch_variance_op(mask: Tensor, corner, size) -> Tensor:
    """Population variance of the ``size`` x ``size`` window at ``corner``,
    pooled across the batch."""
    r, c = corner
    patch = mask.data[:, :, r:r + size, c:c + size].astype(np.float64)
    dev = patch - patch.mean()
    m = patch.size

    def _backward(g):
        out = np.zeros(mask.shape)
        out[:, :, r:r + size, c:c + size] = float(g) * 2.0 * dev / m
        return (out,)

    return ad.from_op(np.array(np.mean(dev * dev)), (mask,), _backward)


def area_variance_penalty_op(areas: Tensor, scale=0.01, eps=VARIANCE_EPS) -> Tensor:
    """``1 / (scale * var(areas))`` with population variance."""
    a = areas.data.astype(np.float64).ravel()
    dev = a - a.mean()
    var = np.mean(dev * dev) + eps

    def _backward(g):
        return (-float(g) / (scale * var**2) * 2.0 * dev / a.size,)

    return ad.from_op(np.array(1.0 / (scale * var)), (areas,), _backward)


def weighted_sum_op(terms) -> Tensor:
    """``sum(w * t)`` over ``(w, scalar tensor)`` pairs."""
    weights = [float(w) for w, _ in terms]
    tensors = tuple(t for _, t in terms)
    total = sum(w * float(t.data) for w, t in zip(weights, tensors))
    return ad.from_op(np.array(total), tensors, lambda g: tuple(w * g for w in weights))


@dataclass
class RegTerms:
    dense_penalty: float
    range_penalty: float
    clip_variance_penalty: float
    total: float

    def as_tuple(self):
        return (self.dense_penalty, self.range_penalty, self.clip_variance_penalty)


def _regulariser_ops(mask, areas, config: TrainConfig):
    rng_t = range_penalty_op(mask)
    clip_t = patch_variance_op(mask, config.dry_patch, config.dry_patch_size)
    dense_t = area_variance_penalty_op(areas, config.dense_penalty_scale)
    n = mask.shape[0]
    total = weighted_sum_op([
        (config.range_weight / n, rng_t),
        (config.clip_weight / n, clip_t),
        (1.0 / n, dense_t),
    ])
    terms = RegTerms(float(dense_t.data), config.range_weight * float(rng_t.data),
                     config.clip_weight * float(clip_t.data), float(total.data))
    return total, terms


def activity_regularizers(soft_masks, predicted_areas, dry_patch=(0, 0),
                          config: TrainConfig | None = None) -> RegTerms:
    """Evaluate the three activity penalties on a batch of soft masks.

    Components are reported undivided; ``total`` is their sum divided by the
    batch size. ``soft_masks`` is (n, H, W) or (n, 1, H, W).
    """
    m = np.asarray(soft_masks, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    areas = np.asarray(predicted_areas, dtype=np.float64).reshape(-1, 1)
    if m.shape[0] < 2 or areas.shape[0] != m.shape[0]:
        raise ValueError("activity_regularizers needs a batch of >= 2 masks and matching areas")
    cfg = config or TrainConfig()
    cfg = dataclasses.replace(cfg, dry_patch=tuple(dry_patch))
    cfg.check_dry_patch(m.shape[2:])
    with ad.no_grad():
        _, terms = _regulariser_ops(Tensor(m), Tensor(areas), cfg)
    return terms


def batch_objective(model, x, elevations, config: TrainConfig, eps=VARIANCE_EPS):
    """Training objective on one batch: correlation loss plus regularisers."""
    mask, area = network(model, Tensor(x))
    loss_t = pearson_loss_op(area, elevations, eps)
    reg_t, terms = _regulariser_ops(mask, area, config)
    total = weighted_sum_op([(1.0, loss_t), (1.0, reg_t)])
    return total, float(loss_t.data), terms, mask


# --- data split ---------------------------------------------------------------------


def stratified_split(series: SceneSeries, config: TrainConfig, seed: int):
    """Split into train/test by equal-width elevation strata.

    Each stratum sends ``round((1 - split_fraction) * size)`` scenes to the
    test set (at least one when the stratum has five or more members).
    """
    n = len(series)
    if n < 5:
        raise ValueError(f"stratified_split needs at least 5 scenes, got {n}")
    elev = series.elevations
    lo, hi = elev.min(), elev.max()
    k = config.stratum_count if hi > lo else 1
    if k > 1:
        edges = np.linspace(lo, hi, k + 1)
        strata = np.clip(np.searchsorted(edges, elev, side="right") - 1, 0, k - 1)
    else:
        strata = np.zeros(n, dtype=int)
    rng = np.random.default_rng(seed)
    test = []
    for s in range(k):
        members = np.flatnonzero(strata == s)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        n_test = int(round((1.0 - config.split_fraction) * members.size))
        if members.size >= 5:
            n_test = max(n_test, 1)
        test.extend(members[:n_test].tolist())
    test = sorted(test)
    train = [i for i in range(n) if i not in set(test)]
    return series.subset(train), series.subset(test)


# --- training -----------------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _evaluate(model, x, elevations, chunk=16):
    masks, areas = [], []
    with ad.no_grad():
        for i in range(0, x.shape[0], chunk):
            m, a = network(model, Tensor(x[i:i + chunk]))
            masks.append(m.data)
            areas.append(a.data)
    masks, areas = np.concatenate(masks), np.concatenate(areas).ravel()
    loss = float(pearson_loss_op(Tensor(areas), elevations).data)
    return loss, float(masks.max()) - float(masks.min())


def train(series: SceneSeries, config: TrainConfig | None = None, seed: int | None = None,
          dtype=np.float32, progress=None):
    """Fit a model on ``series`` and return ``(model, reports)``.

    Stops once validation loss has not improved for ``patience`` epochs and
    the training-set mask range exceeds ``range_gate``. The returned model is
    the best-validation checkpoint among epochs that passed the range gate
    (or the best overall if none did).
    """
    config = config or TrainConfig()
    seed = config.seed if seed is None else seed
    h, w = series.shape
    if min(h, w) < 16:
        raise ValueError("training scenes must be at least 16x16")
    config.check_dry_patch((h, w))
    elev_all = series.elevations
    if np.ptp(elev_all) == 0:
        raise UnlearnableSeriesError(
            "gauge elevations are constant: no relation between flooded area and water level"
        )
    train_set, test_set = stratified_split(series, config, seed)
    y_train, y_test = train_set.elevations, test_set.elevations
    if np.ptp(y_train) == 0:
        raise UnlearnableSeriesError("training split has constant gauge elevations")

    model = build_model(config.channels, seed, dtype)
    fit_normalisation(model, train_set.scenes)
    x_train = prepare_input(model, train_set.scenes)
    x_test = prepare_input(model, test_set.scenes) if len(test_set) else None
    state = ad.AdamState(lr=config.lr)
    params = model.params()
    rng = np.random.default_rng([seed, 1])
    batch_size = max(2, int(round(config.batch_fraction * len(train_set))))

    reports, best, best_gated = [], None, None
    wait = 0
    for epoch in range(config.max_epochs):
        terms = None
        for idx in _batches(len(train_set), batch_size, rng):
            total, _, terms, _ = batch_objective(model, x_train[idx], y_train[idx], config)
            ad.backward(total)
            ad.adam_step(params, state)
        train_loss, mask_range = _evaluate(model, x_train, y_train)
        if x_test is not None and len(test_set) >= 2 and np.ptp(y_test) > 0:
            val_loss, _ = _evaluate(model, x_test, y_test)
        else:
            val_loss = train_loss
        report = LossReport(epoch, train_loss, val_loss, mask_range, terms.as_tuple())
        reports.append(report)
        if progress is not None:
            progress(report, model)
        logger.debug("epoch %d train %.4f val %.4f range %.3f", epoch, train_loss,
                     val_loss, mask_range)

        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, model.copy())
            wait = 0
        else:
            wait += 1
        if mask_range > config.range_gate and (best_gated is None or val_loss < best_gated[0]):
            best_gated = (val_loss, epoch, model.copy())
        if wait >= config.patience and mask_range > config.range_gate:
            break

    chosen = best_gated or best
    logger.info("training stopped after %d epochs; keeping epoch %d (val %.4f)",
                len(reports), chosen[1], chosen[0])
    final = chosen[2]
    final.split = ([d for d in train_set.dates], [d for d in test_set.dates])
    return final, reports


# --- inference ----------------------------------------------------------------------


def forward(model: FpgnnModel, stack: GridStack):
    """Soft mask (cropped to the input size) and predicted area for one scene."""
    mask = infer(model, stack)
    with ad.no_grad():
        vals = mask.values.values.astype(np.float64)
        area = ad.dense(Tensor(np.array([[vals.sum()]])), model.head).data
    return mask, float(area.ravel()[0])


def infer(model: FpgnnModel, stack: GridStack) -> SoftMask:
    if model.input_shape is not None and padded_shape(stack.shape) != padded_shape(
        model.input_shape
    ):
        raise RasterError(
            f"scene shape {stack.shape} does not match the training shape {model.input_shape}"
        )
    x = prepare_input(model, [stack])
    with ad.no_grad():
        mask, _ = network(model, Tensor(x))
    h, w = stack.shape
    return SoftMask(Grid(mask.data[0, 0, :h, :w]), stack.acquisition_date)


def infer_series(model: FpgnnModel, stacks) -> list[SoftMask]:
    return [infer(model, s) for s in stacks]


def harden(mask, threshold: float) -> Grid:
    """Water (1) where the soft value is at or above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    values = mask.values.values if isinstance(mask, SoftMask) else np.asarray(
        mask.values if isinstance(mask, Grid) else mask)
    return Grid((values >= np.float32(threshold)).astype(np.float32))
