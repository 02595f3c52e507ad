"""Classical single-band water segmenters working on dB backscatter.

All four return a 0/1 float32 :class:`Grid` of the input's shape with water=1,
where water is always the class with the lower mean intensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .raster import Grid

OTSU_BINS = 256
GMM_VARIANCE_FLOOR = 1e-6


def _as_array(grid) -> np.ndarray:
    return np.asarray(grid.values if isinstance(grid, Grid) else grid, dtype=np.float64)


def _mask(water: np.ndarray) -> Grid:
    return Grid(water.astype(np.float32))


# --- Otsu -----------------------------------------------------------------------


def otsu_edges(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    return np.linspace(lo, hi, bins + 1)


def otsu_threshold(grid, bins: int = OTSU_BINS) -> float:
    """Bin edge maximising between-class variance over a ``bins``-bin histogram.

    Candidates are the upper edges ``edges[1:]``; a candidate ``t`` splits the
    pixels into ``v < t`` and ``v >= t``. Class means use the exact pixel sums
    of each bin, not bin centres. Ties resolve to the lower threshold.
    """
    v = _as_array(grid).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0 or v.min() == v.max():
        raise ValueError("otsu_threshold needs at least two distinct finite values")
    edges = otsu_edges(v, bins)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    # candidate k (1..bins) puts bins [0, k) in the low class; the top edge
    # equals max(v), whose bin is clipped to bins-1, so handle it explicitly
    n0 = np.concatenate([np.cumsum(counts)[:-1], [np.sum(v < edges[-1])]])
    s0 = np.concatenate([np.cumsum(sums)[:-1], [np.sum(v[v < edges[-1]])]])
    score = _between_class_variance(n0, s0, v.size, v.sum())
    return float(edges[1 + int(np.argmax(score))])


def _between_class_variance(n0, s0, n, s):
    n0 = np.asarray(n0, dtype=np.float64)
    n1 = n - n0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / n0
        mu1 = (s - s0) / n1
        score = (n0 / n) * (n1 / n) * (mu0 - mu1) ** 2
    return np.where((n0 > 0) & (n1 > 0), score, -np.inf)


def otsu_segment(grid) -> Grid:
    v = _as_array(grid)
    t = otsu_threshold(v)
    return _mask(v < t)


# --- Chan-Vese ------------------------------------------------------------------


@dataclass
class ChanVeseConfig:
    mu: float = 0.25
    lambda1: float = 1.0
    lambda2: float = 1.0
    max_iters: int = 200
    tol: float = 1e-4
    epsilon: float = 0.1
    init: str = "checkerboard"

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("ChanVeseConfig needs max_iters >= 1 and tol > 0")


def _dirac(phi, eps):
    return (eps / np.pi) / (eps**2 + phi**2)


def _heaviside(phi, eps):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(phi / eps))


def _region_means(img, h):
    w_in = h.sum()
    w_out = (1 - h).sum()
    c1 = (img * h).sum() / w_in if w_in > 0 else 0.0
    c2 = (img * (1 - h)).sum() / w_out if w_out > 0 else 0.0
    return c1, c2


def chan_vese_energy(img, phi, config: ChanVeseConfig) -> float:
    """Regularised Chan-Vese energy with the region means that minimise it
    for this level set (weighted by the smoothed Heaviside)."""
    h = _heaviside(phi, config.epsilon)
    c1, c2 = _region_means(img, h)
    dx = np.zeros_like(h)
    dy = np.zeros_like(h)
    dx[:, :-1] = h[:, 1:] - h[:, :-1]
    dy[:-1, :] = h[1:, :] - h[:-1, :]
    return float(
        config.mu * np.sqrt(dx**2 + dy**2).sum()
        + config.lambda1 * np.sum((img - c1) ** 2 * h)
        + config.lambda2 * np.sum((img - c2) ** 2 * (1 - h))
    )


def _semi_implicit_step(img, phi, c1, c2, cfg, dt):
    # curvature discretisation of Chan and Vese (2001), Neumann borders
    eta = 1e-16
    p = np.pad(phi, 1, mode="edge")
    mid = p[1:-1, 1:-1]
    right, left = p[1:-1, 2:], p[1:-1, :-2]
    down, up = p[2:, 1:-1], p[:-2, 1:-1]
    dx0 = (right - left) / 2.0
    dy0 = (down - up) / 2.0
    k1 = 1.0 / np.sqrt(eta + (right - mid) ** 2 + dy0**2)
    k2 = 1.0 / np.sqrt(eta + (mid - left) ** 2 + dy0**2)
    k3 = 1.0 / np.sqrt(eta + dx0**2 + (down - mid) ** 2)
    k4 = 1.0 / np.sqrt(eta + dx0**2 + (mid - up) ** 2)
    curv = right * k1 + left * k2 + down * k3 + up * k4
    force = -cfg.lambda1 * (img - c1) ** 2 + cfg.lambda2 * (img - c2) ** 2
    d = dt * _dirac(phi, cfg.epsilon)
    return (phi + d * (cfg.mu * curv + force)) / (1.0 + cfg.mu * d * (k1 + k2 + k3 + k4))


def chan_vese_segment(grid, config: ChanVeseConfig | None = None, return_energies=False):
    """Two-phase Chan-Vese with the semi-implicit level-set update.

    The image is rescaled to [0, 1] first. Each sweep recomputes the region
    means and proposes a level-set update; a proposal that would raise the
    energy is pulled back toward the previous level set until it does not, so
    the energy sequence never increases. Stops when the relative energy change
    and the RMS level-set change both fall below ``tol``, or after
    ``max_iters`` sweeps. Returns the water mask (and the energy after every
    sweep when ``return_energies`` is set).
    """
    cfg = config or ChanVeseConfig()
    raw = _as_array(grid)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        out = _mask(np.zeros(raw.shape, dtype=bool))
        return (out, [0.0]) if return_energies else out
    img = (raw - lo) / (hi - lo)
    rows, cols = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    if cfg.init != "checkerboard":
        raise ValueError(f"unknown init {cfg.init!r}")
    phi = np.sin(np.pi / 5 * rows) * np.sin(np.pi / 5 * cols)

    energy = chan_vese_energy(img, phi, cfg)
    energies = [energy]
    for _ in range(cfg.max_iters):
        c1, c2 = _region_means(img, _heaviside(phi, cfg.epsilon))
        step = _semi_implicit_step(img, phi, c1, c2, cfg, dt=0.5) - phi
        alpha = 1.0
        while True:
            trial = phi + alpha * step
            e_trial = chan_vese_energy(img, trial, cfg)
            if e_trial <= energy or alpha < 1e-6:
                break
            alpha *= 0.5
        if e_trial > energy:
            break
        change = np.sqrt(np.mean((trial - phi) ** 2))
        rel = (energy - e_trial) / max(energy, 1e-12)
        phi, energy = trial, e_trial
        energies.append(energy)
        if change < cfg.tol and rel < cfg.tol:
            break

    inside = phi > 0
    if inside.all() or not inside.any():
        water = np.zeros(img.shape, dtype=bool)
    else:
        water = inside if img[inside].mean() < img[~inside].mean() else ~inside
    out = _mask(water)
    return (out, energies) if return_energies else out


# --- Gaussian mixture -----------------------------------------------------------


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list
    iterations: int

    @property
    def component_count(self) -> int:
        return len(self.weights)


def _component_logpdf(x, means, variances):
    return -0.5 * (np.log(2 * np.pi * variances)[None, :]
                   + (x[:, None] - means[None, :]) ** 2 / variances[None, :])


def fit_gmm(samples, component_count=2, seed=0, max_iters=200, tol=1e-6,
            variance_floor=GMM_VARIANCE_FLOOR) -> GmmParams:
    """EM for a 1-D Gaussian mixture, initialised from quantile slices.

    Converges when the mean per-sample log-likelihood changes by less than
    ``tol``. ``seed`` only breaks exact ties in the initial slices.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size < component_count:
        raise ValueError("fewer samples than mixture components")
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(x.size), x))
    slices = np.array_split(x[order], component_count)
    means = np.array([s.mean() for s in slices])
    variances = np.maximum([s.var() for s in slices], variance_floor)
    weights = np.full(component_count, 1.0 / component_count)

    lls = []
    it = 0
    for it in range(1, max_iters + 1):
        logp = _component_logpdf(x, means, variances) + np.log(np.maximum(weights, 1e-300))
        norm = logsumexp(logp, axis=1)
        lls.append(float(norm.mean()))
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) < tol:
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / x.size
        safe = np.where(nk > 0, nk, 1.0)
        means = np.where(nk > 0, (resp * x[:, None]).sum(axis=0) / safe, means)
        var = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / safe
        variances = np.maximum(np.where(nk > 0, var, variances), variance_floor)
    return GmmParams(weights, means, variances, lls, it)


def gmm_segment(grid, component_count=2, seed=0):
    """Label pixels by maximum responsibility; water is the lowest-mean component."""
    v = _as_array(grid)
    params = fit_gmm(v, component_count, seed)
    logp = _component_logpdf(v.ravel(), params.means, params.variances) + np.log(
        np.maximum(params.weights, 1e-300))
    label = np.argmax(logp, axis=1).reshape(v.shape)
    water_c = int(np.argmin(params.means))
    if np.ptp(params.means) <= 1e-12 * max(1.0, abs(params.means[0])):
        water = np.zeros(v.shape, dtype=bool)
    else:
        water = label == water_c
    return _mask(water), params


# --- spectral clustering ------------------------------------------------------


@dataclass
class SpectralConfig:
    sample_count: int = 600
    knn_k: int = 20
    sigma: float | None = None
    spatial_weight: float = 0.25
    seed: int = 0


def knn_affinity(features, k, sigma=None):
    """Symmetric k-NN Gaussian affinity; disconnected graphs are joined by the
    minimum spanning tree of the full distance graph."""
    n = features.shape[0]
    k = min(k, n - 1)
    tree = cKDTree(features)
    dist, nbr = tree.query(features, k + 1)
    dist, nbr = dist[:, 1:], nbr[:, 1:]
    if sigma is None:
        sigma = float(np.median(dist)) or 1.0
    rows = np.repeat(np.arange(n), k)
    w = np.exp(-dist.ravel() ** 2 / (2 * sigma**2))
    a = sparse.coo_matrix((w, (rows, nbr.ravel())), shape=(n, n)).tocsr()
    a = a.maximum(a.T)
    n_comp, _ = csgraph.connected_components(a, directed=False)
    if n_comp > 1:
        full = np.linalg.norm(features[:, None, :] - features[None, :, :], axis=-1)
        mst = csgraph.minimum_spanning_tree(full).tocoo()
        extra = sparse.coo_matrix(
            (np.exp(-mst.data**2 / (2 * sigma**2)) + 1e-12, (mst.row, mst.col)), shape=(n, n)
        ).tocsr()
        a = a.maximum(extra).maximum(extra.T)
    return a.toarray()


def normalized_cut_value(affinity, labels) -> float:
    labels = np.asarray(labels, dtype=bool)
    deg = affinity.sum(axis=1)
    cut = affinity[labels][:, ~labels].sum()
    vol_a, vol_b = deg[labels].sum(), deg[~labels].sum()
    if vol_a == 0 or vol_b == 0:
        return np.inf
    return float(cut / vol_a + cut / vol_b)


def spectral_bipartition(affinity) -> np.ndarray:
    """Sweep cut along the second eigenvector of the normalised Laplacian,
    keeping the split with the smallest normalised cut."""
    deg = affinity.sum(axis=1)
    d_inv = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    lap = np.eye(len(deg)) - d_inv[:, None] * affinity * d_inv[None, :]
    _, vecs = np.linalg.eigh(lap)
    fiedler = vecs[:, 1] * d_inv
    order = np.argsort(fiedler, kind="stable")
    best, best_labels = np.inf, None
    for cut in range(1, len(order)):
        if fiedler[order[cut]] == fiedler[order[cut - 1]]:
            continue
        labels = np.zeros(len(order), dtype=bool)
        labels[order[:cut]] = True
        value = normalized_cut_value(affinity, labels)
        if value < best:
            best, best_labels = value, labels
    if best_labels is None:
        best_labels = fiedler < 0
    return best_labels


def spectral_segment(grid, config: SpectralConfig | None = None) -> Grid:
    cfg = config or SpectralConfig()
    v = _as_array(grid)
    h, w = v.shape
    if np.ptp(v) == 0:
        return _mask(np.zeros(v.shape, dtype=bool))
    rows, cols = np.mgrid[0:h, 0:w]
    z = (v - v.mean()) / v.std()
    feats = np.column_stack([
        z.ravel(),
        cfg.spatial_weight * rows.ravel() / max(h - 1, 1),
        cfg.spatial_weight * cols.ravel() / max(w - 1, 1),
    ])
    rng = np.random.default_rng(cfg.seed)
    n = min(cfg.sample_count, v.size)
    pick = np.sort(rng.choice(v.size, size=n, replace=False))
    sample = feats[pick]
    labels = spectral_bipartition(knn_affinity(sample, cfg.knn_k, cfg.sigma))
    vals = v.ravel()[pick]
    if labels.all() or not labels.any():
        return _mask(np.zeros(v.shape, dtype=bool))
    water_label = vals[labels].mean() < vals[~labels].mean()
    _, nearest = cKDTree(sample).query(feats)
    water = (labels[nearest] == water_label).reshape(v.shape)
    return _mask(water)
