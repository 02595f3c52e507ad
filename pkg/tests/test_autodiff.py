import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_tensor
from hydrocorr import autodiff as ad
from hydrocorr.autodiff import LayerParams, ShapeError, Tensor

F64 = np.float64


def layer(kind, w, b=None, constraint=None):
    w = np.asarray(w, dtype=F64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=F64)
    return LayerParams(kind, Tensor(w), Tensor(b), constraint)


# --- independent loop oracles --------------------------------------------------


def conv_same_loops(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for r in range(h):
                for q in range(wd):
                    acc = b[oi]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                rr, qq = r + i - p, q + j - p
                                if 0 <= rr < h and 0 <= qq < wd:
                                    acc += x[ni, ci, rr, qq] * w[oi, ci, i, j]
                    out[ni, oi, r, q] = acc
    return out


def downsample_conv_loops(y, w):
    """Stride-2 4x4 correlation with one pixel of zero padding: the map whose
    adjoint is the cropped transposed convolution."""
    n, o, H, W = y.shape
    _, c, k, _ = w.shape
    h, wd = H // 2, W // 2
    out = np.zeros((n, c, h, wd))
    for ni in range(n):
        for ci in range(c):
            for a in range(h):
                for bb in range(wd):
                    acc = 0.0
                    for oi in range(o):
                        for i in range(k):
                            for j in range(k):
                                r, q = 2 * a + i - 1, 2 * bb + j - 1
                                if 0 <= r < H and 0 <= q < W:
                                    acc += y[ni, oi, r, q] * w[oi, ci, i, j]
                    out[ni, ci, a, bb] = acc
    return out


# --- conv2d ---------------------------------------------------------------------


def test_conv_ones_kernel_center_and_corner():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), layer("conv", np.ones((1, 1, 3, 3)))).data
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == out[0, 0, 0, 2] == 4


def test_conv_identity_and_bias():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), layer("conv", np.ones((1, 1, 1, 1)))).data, x)
    out = ad.conv2d(Tensor(x), layer("conv", np.zeros((1, 1, 3, 3)), [2.5])).data
    assert np.all(out == 2.5)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loops(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = ad.conv2d(Tensor(x), layer("conv", w, b)).data
    assert out.shape == (2, 4, 6, 5)
    np.testing.assert_allclose(out, conv_same_loops(x, w, b), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), layer("conv", np.ones((1, 3, 3, 3))))


# --- pooling --------------------------------------------------------------------


def test_avg_pool_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    assert ad.avg_pool2(Tensor(x)).data.item() == 2.5
    c = ad.avg_pool2(Tensor(np.full((1, 2, 4, 6), 3.0))).data
    assert c.shape == (1, 2, 2, 3) and np.all(c == 3.0)


def test_avg_pool_gradient_is_quarter():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    ad.backward(_sum(ad.avg_pool2(x)))
    assert np.allclose(x.grad, 0.25)
    # finite-difference oracle on the same quantity
    h = 1e-3
    for idx in [(0, 0, 0, 0), (0, 1, 3, 2)]:
        xp, xm = x.data.copy(), x.data.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (ad.avg_pool2(Tensor(xp)).data.sum() - ad.avg_pool2(Tensor(xm)).data.sum()) / (2 * h)
        assert abs(fd - 0.25) < 1e-9


def test_avg_pool_odd_dims():
    with pytest.raises(ShapeError):
        ad.avg_pool2(Tensor(np.ones((1, 1, 3, 4))))


# --- transposed convolution -----------------------------------------------------


def test_transposed_conv_shape_and_zero_input():
    p = layer("transposed_conv", np.ones((2, 3, 4, 4)), [0.5, -1.0])
    out = ad.transposed_conv2(Tensor(np.zeros((1, 3, 5, 7))), p).data
    assert out.shape == (1, 2, 10, 14)
    assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == -1.0)


def test_transposed_conv_scatter_single_pixel():
    w = np.ones((1, 1, 4, 4))
    raw = ad._upsample_raw(np.ones((1, 1, 1, 1)), w)
    assert raw.shape == (1, 1, 4, 4) and raw.sum() == 16
    out = ad.transposed_conv2(Tensor(np.ones((1, 1, 1, 1))), layer("transposed_conv", w)).data
    # one row/column cropped from each side of the 4x4 scatter
    assert out.shape == (1, 1, 2, 2) and np.all(out == 1.0) and out.sum() == 4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_transposed_conv_is_adjoint_of_stride2_conv(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(2, 3, 4, 4))
    y = rng.normal(size=(2, 2, 6, 8))
    up = ad.transposed_conv2(Tensor(x), layer("transposed_conv", w)).data
    lhs = np.sum(downsample_conv_loops(y, w) * x)
    rhs = np.sum(y * up)
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs))


def test_transposed_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        ad.transposed_conv2(Tensor(np.ones((1, 2, 2, 2))), layer("transposed_conv", np.ones((1, 3, 4, 4))))


# --- elementwise, add, pooling heads ----------------------------------------------


def test_activations():
    assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    assert ad.relu(Tensor(np.array([-3.0]))).data[0] == 0
    x = Tensor(np.zeros(1), requires_grad=True)
    ad.backward(_sum(ad.sigmoid(x)))
    assert x.grad[0] == 0.25


@settings(max_examples=100)
@given(st.floats(-1e4, 1e4))
def test_sigmoid_strictly_inside_unit_interval(v):
    for dtype in (np.float32, np.float64):
        s = ad.sigmoid(Tensor(np.array([v], dtype=dtype))).data[0]
        assert 0 < s < 1


def test_add():
    a = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
    b = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
    out = ad.add(a, b)
    np.testing.assert_array_equal(out.data, a.data)
    ad.backward(_sum(out))
    assert np.all(a.grad == 1) and np.all(b.grad == 1)
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.zeros((1, 1, 2, 2))))


def test_global_sum_pool():
    m = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]])[None, None], requires_grad=True)
    out = ad.global_sum_pool(m)
    assert out.shape == (1, 1) and out.data[0, 0] == 2.0
    assert ad.global_sum_pool(Tensor(np.zeros((1, 1, 3, 3)))).data[0, 0] == 0
    ad.backward(_sum(out))
    assert np.all(m.grad == 1)
    with pytest.raises(ShapeError):
        ad.global_sum_pool(Tensor(np.zeros((1, 2, 3, 3))))


def test_dense():
    assert ad.dense(Tensor(np.array([[3.0]])), layer("dense", [[2.0]])).data[0, 0] == 6
    x = np.array([[1.5], [-2.0]])
    np.testing.assert_array_equal(ad.dense(Tensor(x), layer("dense", [[1.0]])).data, x)
    with pytest.raises(ShapeError):
        ad.dense(Tensor(np.ones((1, 2))), layer("dense", [[1.0]]))


# --- backward ---------------------------------------------------------------------


def _sum(t):
    return ad.from_op(np.array(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, t.shape),))


def _sum_sq(t):
    return ad.from_op(np.array((t.data**2).sum()), (t,), lambda g: (2 * g * t.data,))


def test_backward_linear_and_square():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    ad.backward(_sum(x))
    assert np.all(x.grad == 1)
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(_sum_sq(y))
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        ad.backward(Tensor(np.ones(3), requires_grad=True))


def test_shared_node_accumulates():
    x = Tensor(np.array([1.0, 2.0, 3.0])[None, None, None], requires_grad=True)
    ad.backward(_sum(ad.add(x, x)))
    assert np.all(x.grad == 2)


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad and y._parents == ()


LAYER_CASES = ["conv3", "conv1", "pool", "deconv", "relu", "sigmoid", "add", "sumpool", "dense"]


def _layer_case(name, rng):
    """(loss_fn, tensors to probe) for a single op followed by a random linear
    read-out, so every output element carries a distinct weight."""
    x = Tensor(rng.normal(size=(2, 3, 16, 16)), requires_grad=True)
    if name in ("conv3", "conv1"):
        k = 3 if name == "conv3" else 1
        p = layer("conv", rng.normal(size=(4, 3, k, k)), rng.normal(size=4))
        fn, probes = (lambda: ad.conv2d(x, p)), [x, p.weights, p.bias]
    elif name == "pool":
        fn, probes = (lambda: ad.avg_pool2(x)), [x]
    elif name == "deconv":
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        p = layer("transposed_conv", rng.normal(size=(2, 3, 4, 4)), rng.normal(size=2))
        fn, probes = (lambda: ad.transposed_conv2(x, p)), [x, p.weights, p.bias]
    elif name == "relu":
        fn, probes = (lambda: ad.relu(x)), [x]
    elif name == "sigmoid":
        fn, probes = (lambda: ad.sigmoid(x)), [x]
    elif name == "add":
        y = Tensor(rng.normal(size=x.shape), requires_grad=True)
        fn, probes = (lambda: ad.add(x, y)), [x, y]
    elif name == "sumpool":
        x = Tensor(rng.normal(size=(2, 1, 16, 16)), requires_grad=True)
        fn, probes = (lambda: ad.global_sum_pool(x)), [x]
    else:
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        p = layer("dense", rng.normal(size=(2, 3)), rng.normal(size=2))
        fn, probes = (lambda: ad.dense(x, p)), [x, p.weights, p.bias]
    readout = rng.normal(size=fn().shape)

    def loss():
        out = fn()
        return ad.from_op(np.array(np.sum(out.data * readout)), (out,), lambda g: (g * readout,))

    return loss, probes


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("name", LAYER_CASES)
def test_layer_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    loss, probes = _layer_case(name, rng)
    for t in probes:
        assert check_tensor(loss, t, rng) < 1e-3


# --- Adam -----------------------------------------------------------------------------


def _single(value, grad, constraint=None):
    p = layer("dense", [[value]], [0.0], constraint)
    p.weights.grad = np.array([[grad]])
    p.bias.grad = np.array([0.0])
    return p


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 300.0])
def test_adam_first_step_moves_by_lr(g):
    p = _single(1.0, g)
    state = ad.AdamState(lr=0.01)
    ad.adam_step([p], state)
    # bias-corrected first step: m/v^0.5 = g/|g|
    expected = 1.0 - 0.01 * g / (abs(g) + 1e-8)
    assert p.weights.data[0, 0] == pytest.approx(expected, abs=1e-12)
    assert p.weights.grad is None


def test_adam_zero_grad_leaves_param():
    p = _single(0.3, 0.0)
    state = ad.AdamState()
    ad.adam_step([p], state)
    assert p.weights.data[0, 0] == 0.3 and state.step_count == 1


def test_adam_projection_clamps_constrained_weight():
    p = _single(0.005, 5.0, "nonnegative")
    ad.adam_step([p], ad.AdamState(lr=0.01))
    assert p.weights.data[0, 0] == 0.0
    p = _single(0.0, 1.0, "nonnegative")
    ad.adam_step([p], ad.AdamState())
    assert p.weights.data[0, 0] >= 0


def test_adam_requires_grads():
    p = layer("dense", [[1.0]])
    with pytest.raises(ValueError, match="gradient"):
        ad.adam_step([p], ad.AdamState())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
def test_constrained_weights_stay_nonnegative(grads):
    p = layer("dense", [[0.05]], constraint="nonnegative")
    state = ad.AdamState()
    for g in grads:
        p.weights.grad = np.array([[g]])
        p.bias.grad = np.array([0.0])
        ad.adam_step([p], state)
        assert p.weights.data.min() >= 0


def test_init_nonnegative_head_range():
    rng = np.random.default_rng(0)
    p = LayerParams.init("dense", (1, 50), rng, constraint="nonnegative")
    assert p.weights.data.min() > 0 and p.weights.data.max() <= 0.1


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    layers = {
        "c": LayerParams.init("conv", (2, 1, 3, 3), rng),
        "h": LayerParams.init("dense", (1, 1), rng, constraint="nonnegative"),
    }
    state = ad.AdamState(step_count=3, m=[rng.normal(size=(2, 1, 3, 3))], v=[np.ones(2)])
    ad.save_checkpoint(tmp_path / "ck", layers, state, {"note": 1})
    back, adam, extra = ad.load_checkpoint(tmp_path / "ck.json")
    assert extra == {"note": 1}
    assert back["h"].constraint == "nonnegative"
    for k in layers:
        np.testing.assert_array_equal(back[k].weights.data, layers[k].weights.data)
    assert adam.step_count == 3
    np.testing.assert_array_equal(adam.m[0], state.m[0])


def test_checkpoint_corruption(tmp_path):
    layers = {"c": LayerParams.init("conv", (2, 1, 3, 3), np.random.default_rng(0))}
    ad.save_checkpoint(tmp_path / "ck", layers)
    (tmp_path / "ck.bin").write_bytes(b"\x00" * 3)
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "ck")
    (tmp_path / "ck.json").write_text("not json")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "ck")
