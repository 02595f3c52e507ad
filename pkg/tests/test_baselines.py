import itertools

import numpy as np
import pytest

from hydrocorr import baselines as B
from hydrocorr.raster import Grid
from hydrocorr.validation import class_iou


def brute_otsu(v, bins=256):
    """Score every upper bin edge directly from the pixels it separates."""
    v = np.asarray(v, dtype=np.float64).ravel()
    edges = np.linspace(v.min(), v.max(), bins + 1)
    best_t, best_s = None, -np.inf
    for t in edges[1:]:
        lo, hi = v[v < t], v[v >= t]
        if lo.size == 0 or hi.size == 0:
            continue
        w0, w1 = lo.size / v.size, hi.size / v.size
        s = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if s > best_s * (1 + 1e-12):
            best_t, best_s = t, s
    return best_t


def test_otsu_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for i in range(100):
        kind = i % 4
        if kind == 0:
            img = rng.normal(size=(20, 20))
        elif kind == 1:
            img = np.where(rng.random((16, 24)) < rng.random(), rng.normal(-20, 2, (16, 24)),
                           rng.normal(-8, 2, (16, 24)))
        elif kind == 2:
            img = rng.gamma(2.0, 1.0, (30, 10))
        else:
            img = rng.integers(0, 7, (12, 12)).astype(float)
        assert B.otsu_threshold(img) == brute_otsu(img)


def test_otsu_bimodal_and_errors():
    img = np.zeros((10, 10))
    img[:, 5:] = 10
    t = B.otsu_threshold(img)
    assert 0 < t <= 10
    mask = B.otsu_segment(Grid(img)).values
    np.testing.assert_array_equal(mask, (img == 0).astype(np.float32))
    # water stays on the dark side when contrast is inverted
    np.testing.assert_array_equal(B.otsu_segment(Grid(10 - img)).values, (img == 10))
    with pytest.raises(ValueError):
        B.otsu_threshold(np.full((4, 4), 3.0))


def _disk_scene(noise, seed=0, size=48):
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:size, 0:size]
    truth = (r - size / 2) ** 2 + (c - size / 2) ** 2 < (size / 4) ** 2
    img = np.where(truth, -20.0, -8.0) + rng.normal(0, noise, truth.shape)
    return img, truth


def test_otsu_noisy_scene():
    img, truth = _disk_scene(1.0)
    assert class_iou(B.otsu_segment(Grid(img)).values > 0, truth) >= 0.95


def test_chan_vese_disk_and_monotone_energy():
    img, truth = _disk_scene(0.0)
    mask, energies = B.chan_vese_segment(Grid(img), return_energies=True)
    assert class_iou(mask.values > 0, truth) >= 0.95
    assert np.all(np.diff(energies) <= 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_chan_vese_energy_non_increasing_on_noise(seed):
    img, _ = _disk_scene(3.0, seed)
    mask, energies = B.chan_vese_segment(Grid(img), return_energies=True)
    assert np.all(np.diff(energies) <= 1e-9)
    assert set(np.unique(mask.values)) <= {0.0, 1.0}


def test_chan_vese_constant_image():
    assert not B.chan_vese_segment(Grid(np.full((8, 8), -5.0))).values.any()


def test_gmm_recovers_known_mixture():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-20, 1, 5000), rng.normal(-8, 1, 5000)])
    p = B.fit_gmm(x, 2, seed=0)
    order = np.argsort(p.means)
    assert np.allclose(p.means[order], [-20, -8], atol=0.2)
    assert np.allclose(p.weights, 0.5, atol=0.05)
    assert abs(p.weights.sum() - 1) < 1e-9


def test_gmm_log_likelihood_monotone():
    for run in range(20):
        rng = np.random.default_rng(run)
        k = 2 + run % 2
        x = np.concatenate([rng.normal(rng.uniform(-25, 0), rng.uniform(0.3, 3), rng.integers(50, 500))
                            for _ in range(k + 1)])
        p = B.fit_gmm(x, k, seed=run)
        assert np.all(np.diff(p.log_likelihoods) >= -1e-9)
        assert np.all(p.variances >= B.GMM_VARIANCE_FLOOR)


def test_gmm_identical_samples():
    mask, p = B.gmm_segment(Grid(np.full((6, 6), -12.0)))
    assert not mask.values.any()
    assert np.all(p.variances == B.GMM_VARIANCE_FLOOR)


def test_gmm_segment_orientation():
    img, truth = _disk_scene(1.0)
    mask, p = B.gmm_segment(Grid(img))
    assert class_iou(mask.values > 0, truth) >= 0.95


def brute_ncut(aff):
    n = aff.shape[0]
    best, best_labels = np.inf, None
    # fix sample 0 on the True side to skip mirrored labelings
    for bits in itertools.product([False, True], repeat=n - 1):
        labels = np.array((True,) + bits)
        if labels.all():
            continue
        v = B.normalized_cut_value(aff, labels)
        if v < best:
            best, best_labels = v, labels
    return best, best_labels


@pytest.mark.parametrize("seed", range(6))
def test_spectral_bipartition_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 8 + seed % 5
    na = rng.integers(2, n - 1)
    feats = np.concatenate([rng.normal(0, 0.3, (na, 2)), rng.normal(5, 0.3, (n - na, 2))])
    aff = B.knn_affinity(feats, k=3)
    best, labels = brute_ncut(aff)
    got = B.spectral_bipartition(aff)
    assert B.normalized_cut_value(aff, got) == pytest.approx(best, rel=1e-12)
    assert np.array_equal(got, labels) or np.array_equal(got, ~labels)
    truth = np.arange(n) < na
    assert np.array_equal(got, truth) or np.array_equal(got, ~truth)


def test_knn_affinity_connects_components():
    feats = np.array([[0.0], [0.1], [0.2], [50.0], [50.1], [50.2]])
    aff = B.knn_affinity(feats, k=1)
    assert np.allclose(aff, aff.T)
    from scipy.sparse import csgraph
    assert csgraph.connected_components(aff > 0)[0] == 1


def test_spectral_segment_blobs_and_determinism():
    img, truth = _disk_scene(1.0, size=32)
    cfg = B.SpectralConfig(sample_count=300)
    a = B.spectral_segment(Grid(img), cfg)
    b = B.spectral_segment(Grid(img), cfg)
    assert a == b
    assert class_iou(a.values > 0, truth) >= 0.9


def test_spectral_constant_image():
    assert not B.spectral_segment(Grid(np.zeros((10, 10)))).values.any()


@pytest.mark.parametrize("method", ["otsu", "cv", "gmm", "spectral"])
def test_outputs_are_binary_at_input_shape(method):
    img, _ = _disk_scene(2.0, size=24)
    img = img[:, :20]
    fn = {"otsu": B.otsu_segment, "cv": B.chan_vese_segment,
          "gmm": lambda g: B.gmm_segment(g)[0], "spectral": B.spectral_segment}[method]
    out = fn(Grid(img)).values
    assert out.shape == (24, 20)
    assert set(np.unique(out)) <= {0.0, 1.0}
