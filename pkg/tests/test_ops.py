import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecluster.nn import ops
from densecluster.nn import init_head, init_random, proposed_topology
from oracles import central_difference, naive_conv3d, relative_error

RTOL = 1e-4


def _fd_check(loss, x, analytic, coords=None):
    numeric = central_difference(loss, x, coords=coords)
    a = analytic.reshape(-1) if coords is None else analytic.reshape(-1)[list(coords)]
    err = relative_error(a, numeric, floor=1e-8)
    assert err.max() < RTOL, err.max()


# --- convolution ------------------------------------------------------------

def test_conv_all_ones_counts_overlap():
    x = np.ones((3, 3, 3, 1))
    out = ops.conv3d_forward(x, np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    assert out[1, 1, 1, 0] == 27
    assert out[0, 0, 0, 0] == 8
    assert out[0, 1, 1, 0] == 18


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 5, 6, 2))
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv3d_forward(x, w, np.zeros(2)), x)


def test_conv_zero_input_gives_bias():
    out = ops.conv3d_forward(np.zeros((4, 4, 4, 3)), np.ones((2, 3, 3, 3, 3)), np.array([0.5, -2.0]))
    assert np.all(out[..., 0] == 0.5) and np.all(out[..., 1] == -2.0)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv3d_forward(np.zeros((4, 4, 4, 2)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("ksize", [1, 3])
def test_conv_matches_naive_loops(ksize):
    rng = np.random.default_rng(ksize)
    x = rng.standard_normal((4, 3, 5, 3))
    w = rng.standard_normal((2, 3, ksize, ksize, ksize))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(ops.conv3d_forward(x, w, b), naive_conv3d(x, w, b), atol=1e-12)


def test_conv_batch_equals_per_sample():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 4, 4, 2))
    w = rng.standard_normal((5, 2, 3, 3, 3))
    b = rng.standard_normal(5)
    batched = ops.conv3d_forward(x, w, b)
    for i in range(3):
        np.testing.assert_allclose(batched[i], ops.conv3d_forward(x[i], w, b), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ksize", [1, 3])
def test_conv_backward_finite_differences(seed, ksize):
    rng = np.random.default_rng(seed)
    c_in, c_out = (1, 1) if seed == 0 else (2, 3)
    x = rng.standard_normal((4, 4, 4, c_in))
    w = rng.standard_normal((c_out, c_in, ksize, ksize, ksize))
    b = rng.standard_normal(c_out)
    r = rng.standard_normal((4, 4, 4, c_out))

    def loss():
        return float((ops.conv3d_forward(x, w, b) * r).sum())

    gx, gw, gb = ops.conv3d_backward(x, w, r)
    _fd_check(loss, x, gx)
    _fd_check(loss, w, gw)
    _fd_check(loss, b, gb)


def test_conv_grad_bias_is_spatial_sum():
    rng = np.random.default_rng(2)
    g = rng.standard_normal((2, 4, 4, 4, 3))
    _, _, gb = ops.conv3d_backward(rng.standard_normal((2, 4, 4, 4, 2)),
                                   rng.standard_normal((3, 2, 3, 3, 3)), g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1, 2, 3)))


def test_conv_zero_grad_out():
    rng = np.random.default_rng(3)
    gx, gw, gb = ops.conv3d_backward(rng.standard_normal((4, 4, 4, 2)),
                                     rng.standard_normal((3, 2, 3, 3, 3)), np.zeros((4, 4, 4, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_shape_mismatch():
    with pytest.raises(ValueError):
        ops.conv3d_backward(np.zeros((4, 4, 4, 2)), np.zeros((3, 2, 3, 3, 3)), np.zeros((4, 4, 4, 2)))


# --- relu, pooling, upsampling ----------------------------------------------

def test_relu_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.01, 1.0, (3, 3, 3, 2)) * rng.choice([-1, 1], (3, 3, 3, 2))
    r = rng.standard_normal(x.shape)
    _fd_check(lambda: float((ops.relu_forward(x) * r).sum()), x, ops.relu_backward(x, r))


def test_maxpool_block():
    x = np.arange(1, 9, dtype=float).reshape(2, 2, 2, 1)
    out, idx = ops.maxpool2_forward(x)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 8
    assert idx[0, 0, 0, 0] == 7


def test_maxpool_tie_goes_to_first_index():
    out, idx = ops.maxpool2_forward(np.ones((2, 2, 2, 1)))
    g = ops.maxpool2_backward(np.ones_like(out), idx)
    assert g[0, 0, 0, 0] == 1 and g.sum() == 1


def test_maxpool_odd_dims():
    with pytest.raises(ValueError, match="even"):
        ops.maxpool2_forward(np.zeros((3, 4, 4, 1)))


def test_maxpool_finite_differences():
    rng = np.random.default_rng(5)
    # distinct values spaced well beyond the FD step so the argmax is stable
    x = (rng.permutation(4 * 4 * 4 * 2) * 0.01).reshape(4, 4, 4, 2).astype(float)
    r = rng.standard_normal((2, 2, 2, 2))
    out, idx = ops.maxpool2_forward(x)
    _fd_check(lambda: float((ops.maxpool2_forward(x)[0] * r).sum()), x, ops.maxpool2_backward(r, idx))


def test_upsample_constant():
    out = ops.trilinear_up2_forward(np.full((2, 3, 4, 2), 0.7))
    assert out.shape == (4, 6, 8, 2)
    np.testing.assert_allclose(out, 0.7)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_upsample_profile(axis):
    shape = [1, 1, 1]
    shape[axis] = 2
    x = np.array([0.0, 1.0]).reshape(shape + [1])
    out = np.moveaxis(ops.trilinear_up2_forward(x)[..., 0], axis, 0)
    assert out.shape == (4, 2, 2)
    for line in out.reshape(4, -1).T:
        np.testing.assert_allclose(line, [0, 0.25, 0.75, 1], atol=1e-15)


def test_upsample_backward_is_transpose():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 2, 4, 3))
    g = rng.standard_normal((2, 6, 4, 8, 3))
    lhs = (ops.trilinear_up2_forward(x) * g).sum()
    rhs = (x * ops.trilinear_up2_backward(g)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_upsample_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 2, 4, 2))
    r = rng.standard_normal((6, 4, 8, 2))
    _fd_check(lambda: float((ops.trilinear_up2_forward(x) * r).sum()), x,
              ops.trilinear_up2_backward(r))


# --- masked pooling, head, loss ---------------------------------------------

def test_masked_pool_constant_channel():
    f = np.zeros((4, 4, 4, 2))
    f[..., 1] = 3.5
    m = np.zeros((4, 4, 4), bool)
    m[1:3, :, 2] = True
    np.testing.assert_allclose(ops.masked_avg_pool(f, m), [0.0, 3.5])


def test_masked_pool_mask_indicator():
    m = np.ones((4, 4, 4), bool)
    assert ops.masked_avg_pool(m[..., None].astype(float), m)[0] == 1.0


def test_masked_pool_two_voxels():
    f = np.zeros((4, 4, 4, 1))
    m = np.zeros((4, 4, 4), bool)
    f[0, 0, 0], f[3, 3, 3] = 1, 3
    m[0, 0, 0] = m[3, 3, 3] = True
    assert ops.masked_avg_pool(f, m)[0] == 2.0


def test_masked_pool_empty_mask():
    with pytest.raises(ValueError, match="empty"):
        ops.masked_avg_pool(np.zeros((4, 4, 4, 1)), np.zeros((4, 4, 4), bool))


def test_masked_pool_finite_differences():
    rng = np.random.default_rng(8)
    f = rng.standard_normal((2, 4, 4, 4, 3))
    m = rng.random((2, 4, 4, 4)) > 0.5
    r = rng.standard_normal((2, 3))
    _fd_check(lambda: float((ops.masked_avg_pool(f, m) * r).sum()), f,
              ops.masked_avg_pool_backward(r, m))


def test_head_identity_like():
    w = np.eye(4).reshape(4, 4, 1, 1, 1)
    p = np.array([0.1, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(ops.head_apply(w, np.zeros(4), p), p)


def test_head_zero_weight():
    b = np.array([1.0, -1.0, 2.0])
    np.testing.assert_array_equal(ops.head_apply(np.zeros((3, 4, 1, 1, 1)), b, np.ones(4)), b)


def test_head_row_of_ones():
    w = np.zeros((2, 4, 1, 1, 1))
    w[0] = 1
    assert ops.head_apply(w, np.zeros(2), np.full(4, 0.5))[0] == 2.0


def test_head_length_mismatch():
    with pytest.raises(ValueError):
        ops.head_apply(np.zeros((2, 4, 1, 1, 1)), np.zeros(2), np.ones(3))


def test_head_finite_differences():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((3, 5, 1, 1, 1))
    b = rng.standard_normal(3)
    p = rng.standard_normal((4, 5))
    r = rng.standard_normal((4, 3))

    def loss():
        return float((ops.head_apply(w, b, p) * r).sum())

    gp, gw, gb = ops.head_backward(w, p, r)
    _fd_check(loss, p, gp)
    _fd_check(loss, w, gw)
    _fd_check(loss, b, gb)


def test_xent_uniform_logits():
    loss, grad = ops.softmax_xent(np.zeros(6), 2)
    assert loss == pytest.approx(math.log(6), abs=1e-9)
    assert grad.sum() == pytest.approx(0, abs=1e-12)


def test_xent_two_logits():
    loss, _ = ops.softmax_xent(np.array([1.0, 0.0]), 0)
    assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_xent(np.zeros(3), 3)


def test_xent_stable_for_large_logits():
    loss, grad = ops.softmax_xent(np.array([1000.0, 0.0]), 1)
    assert loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_xent_finite_differences():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, g = ops.softmax_xent(z, y)
    _fd_check(lambda: ops.softmax_xent(z, y)[0], z, g)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.data())
def test_xent_bounds(logits, data):
    z = np.array(logits)
    label = data.draw(st.integers(0, len(z) - 1))
    loss, grad = ops.softmax_xent(z, label)
    assert 0 <= loss <= math.log(len(z)) + (z.max() - z.min()) + 1e-12
    assert abs(grad.sum()) < 1e-12


# --- optimizer and init -----------------------------------------------------

def test_sgd_plain_step():
    p = {"a": np.array([1.0])}
    ops.sgd_step(p, {"a": np.array([0.25])}, lr=1.0, momentum=0.0, velocity={})
    assert p["a"][0] == 0.75


def test_sgd_zero_gradient():
    p = {"a": np.array([1.0, 2.0])}
    ops.sgd_step(p, {"a": np.zeros(2)}, lr=0.1, momentum=0.9, velocity={})
    np.testing.assert_array_equal(p["a"], [1.0, 2.0])


def test_sgd_momentum_second_update():
    p = {"a": np.array([0.0])}
    vel = {}
    g = {"a": np.array([1.0])}
    ops.sgd_step(p, g, lr=0.1, momentum=0.9, velocity=vel)
    before = p["a"][0]
    ops.sgd_step(p, g, lr=0.1, momentum=0.9, velocity=vel)
    assert before - p["a"][0] == pytest.approx(0.1 * 1.0 * 1.9)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        ops.sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.1, 0.0, {})


def test_init_deterministic_and_seed_dependent():
    topo = proposed_topology(base_filters=2, levels=2)
    a, b, c = init_random(topo, 4), init_random(topo, 4), init_random(topo, 5)
    assert a.param_bytes() == b.param_bytes()
    assert a.param_bytes() != c.param_bytes()
    assert init_head(8, 3, 1).weight.tobytes() == init_head(8, 3, 1).weight.tobytes()


def test_init_within_fan_in_bound():
    net = init_random(proposed_topology(), 0)
    for name, v in net.params.items():
        w = net.params[name.rsplit(".", 1)[0] + ".weight"]
        bound = math.sqrt(1.0 / (w.shape[1] * 27))
        assert np.abs(v).max() <= bound * (1 + 1e-6), name
    head = init_head(8, 6, 0)
    assert np.abs(head.weight).max() <= math.sqrt(1 / 8) * (1 + 1e-6)
