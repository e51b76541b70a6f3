import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cprgcn.tensor import (
    Adam,
    AdamState,
    DimensionError,
    InvalidLabelError,
    Tensor,
    UnsupportedConfigurationError,
    adam_step,
    check_gradients,
    concat,
    conv3d,
    kernels,
    load_checkpoint,
    lstm_cell,
    matmul,
    maxpool3d,
    no_grad,
    numeric_gradient,
    relative_error,
    save_checkpoint,
    softmax_cross_entropy,
)


@pytest.fixture(params=kernels.available())
def backend(request):
    previous = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(previous)


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# ----------------------------------------------------------------------------- matmul

def test_matmul_identity_cases():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    errors = check_gradients(lambda: matmul(a, b).sum(), {"a": a, "b": b}, h=1e-6)
    assert errors["a"] < 1e-5 and errors["b"] < 1e-5


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# ----------------------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((2, 3, 4)))


def test_backward_square_gives_twice_w():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 3)), requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=0, atol=0)


def test_backward_accumulates_across_fan_out():
    w = Tensor([1.5, -2.0], requires_grad=True)
    y = w * 3.0
    (y + y + w).sum().backward()
    np.testing.assert_array_equal(w.grad, [7.0, 7.0])


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (w * 2.0).backward()


def test_topological_order_lists_each_node_once():
    rng = np.random.default_rng(3)
    a = rand(rng, 3, 3)
    h = a
    for _ in range(4):
        h = (h @ a).tanh() + h
    loss = h.sum()
    order = loss.topological_order()
    ids = [t.node_id for t in order]
    assert len(ids) == len(set(ids))
    position = {t.node_id: k for k, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert position[p.node_id] < position[t.node_id]


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


def test_elementwise_and_structural_ops_gradients():
    rng = np.random.default_rng(4)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)

    def f():
        c = concat([a.sigmoid(), (b * a).tanh(), a.relu()], axis=1)
        return c[1:, ::2].reshape(-1).pow(2.0).sum() \
            + (a - b).exp().mean() + (a * a + 1.0).log().sum() + (a / (b * b + 2.0)).sum() \
            + a.T.sum(axis=0).sum()

    errors = check_gradients(f, {"a": a, "b": b})
    assert max(errors.values()) < 1e-6


# ----------------------------------------------------------------------------- conv3d

def direct_conv3d(x, w, b):
    """Brute-force same-padded cross-correlation."""
    cin, d, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((cout, d, h, wd))
    for co in range(cout):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    out[co, z, y, xx] = b[co] + np.sum(w[co] * xp[:, z:z + 3, y:y + 3, xx:xx + 3])
    return out


def test_conv3d_interior_voxel_of_ones_is_27(backend):
    out = conv3d(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 5, 5, 5)
    assert out.data[0, 2, 2, 2] == 27.0
    # corners only see 8 in-bounds voxels under zero padding
    assert out.data[0, 0, 0, 0] == 8.0


def test_conv3d_zero_input_broadcasts_bias(backend):
    bias = np.array([0.5, -1.25])
    out = conv3d(Tensor(np.zeros((3, 4, 4, 4))), Tensor(np.ones((2, 3, 3, 3, 3))), Tensor(bias))
    assert np.array_equal(out.data, np.broadcast_to(bias[:, None, None, None], (2, 4, 4, 4)))


def test_conv3d_matches_direct_summation(backend):
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((2, 4, 5, 3)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(conv3d(Tensor(x), Tensor(w), Tensor(b)).data, direct_conv3d(x, w, b),
                               rtol=1e-12, atol=1e-12)


def test_conv3d_kernel_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(6)
    x = rand(rng, 1, 6, 6, 6)
    w, b = rand(rng, 2, 1, 3, 3, 3), rand(rng, 2)
    target = rng.standard_normal((2, 6, 6, 6))
    errors = check_gradients(lambda: (conv3d(x, w, b) * target).sum().tanh(), {"w": w, "b": b, "x": x})
    assert max(errors.values()) < 1e-4


def test_conv3d_batched_equals_per_sample(backend):
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((3, 2, 4, 4, 4)), rng.standard_normal((4, 2, 3, 3, 3)), rng.standard_normal(4)
    batched = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv3d(Tensor(x[i]), Tensor(w), Tensor(b)).data, atol=1e-13)


def test_conv3d_rejects_other_kernel_sizes():
    with pytest.raises(UnsupportedConfigurationError):
        conv3d(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 5, 5, 5))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.ones((1, 0, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_conv3d_small_grids_match_direct_sum(backend):
    rng = np.random.default_rng(11)
    for side in (1, 2):
        x = rng.standard_normal((2, 3, side, side, side))
        w, b = rng.standard_normal((4, 3, 3, 3, 3)), rng.standard_normal(4)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        expect = np.stack([direct_conv3d(xi, w, b) for xi in x])
        np.testing.assert_allclose(out, expect, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv3d_is_linear_in_input(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)))
    zero = Tensor(np.zeros(2))
    x, y = rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 4, 4, 4))
    lhs = conv3d(Tensor(alpha * x + beta * y), w, zero).data
    rhs = alpha * conv3d(Tensor(x), w, zero).data + beta * conv3d(Tensor(y), w, zero).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_backends_agree_on_conv_and_pool():
    if "cython" not in kernels.available():
        pytest.skip("compiled kernels not built")
    from cprgcn.tensor import _ckernels, _kernels_py

    rng = np.random.default_rng(8)
    x, w, b = rng.standard_normal((3, 4, 6, 6, 6)), rng.standard_normal((5, 4, 3, 3, 3)), rng.standard_normal(5)
    g = rng.standard_normal((3, 5, 6, 6, 6))
    np.testing.assert_allclose(_ckernels.conv3d_forward(x, w, b), _kernels_py.conv3d_forward(x, w, b), atol=1e-12)
    for got, want in zip(_ckernels.conv3d_backward(x, w, g), _kernels_py.conv3d_backward(x, w, g)):
        np.testing.assert_allclose(got, want, atol=1e-11)
    po, pa = _ckernels.maxpool3d_forward(x)
    no, na = _kernels_py.maxpool3d_forward(x)
    assert np.array_equal(po, no) and np.array_equal(pa, na)
    gp = rng.standard_normal(po.shape)
    assert np.array_equal(_ckernels.maxpool3d_backward(gp, pa, x.shape), _kernels_py.maxpool3d_backward(gp, na, x.shape))


# ----------------------------------------------------------------------------- maxpool3d

def test_maxpool_constant_and_shape(backend):
    out = maxpool3d(Tensor(np.full((2, 24, 24, 24), 3.5)))
    assert out.shape == (2, 12, 12, 12)
    assert np.all(out.data == 3.5)


def test_maxpool_block_of_one_to_eight(backend):
    block = np.arange(1.0, 9.0).reshape(1, 2, 2, 2)
    np.random.default_rng(0).shuffle(block.reshape(-1))
    assert maxpool3d(Tensor(block)).data.item() == 8.0


def test_maxpool_ties_route_gradient_to_first_voxel(backend):
    x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    maxpool3d(x).sum().backward()
    expected = np.zeros((1, 2, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)


def test_maxpool_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 4, 4, 4)
    weights = rng.standard_normal((2, 2, 2, 2))
    assert check_gradients(lambda: (maxpool3d(x) * weights).sum(), {"x": x})["x"] < 1e-6


def test_maxpool_rejects_odd_extent():
    with pytest.raises(DimensionError):
        maxpool3d(Tensor(np.ones((1, 4, 5, 4))))


# ----------------------------------------------------------------------------- lstm_cell

def lstm_params(rng, d, k, scale=0.5):
    return (Tensor(scale * rng.standard_normal((d, 4 * k)), requires_grad=True),
            Tensor(scale * rng.standard_normal((k, 4 * k)), requires_grad=True),
            Tensor(scale * rng.standard_normal(4 * k), requires_grad=True))


def test_lstm_zero_everything_gives_zero_state():
    d, k = 3, 4
    h, c = lstm_cell(Tensor(np.zeros(d)), Tensor(np.zeros(k)), Tensor(np.zeros(k)),
                     Tensor(np.zeros((d, 4 * k))), Tensor(np.zeros((k, 4 * k))), Tensor(np.zeros(4 * k)))
    assert np.array_equal(h.data, np.zeros(k)) and np.array_equal(c.data, np.zeros(k))


def test_lstm_saturated_forget_gate_accumulates_cell():
    rng = np.random.default_rng(10)
    d, k = 3, 2
    w_ih, w_hh, b = (rng.standard_normal((d, 4 * k)), rng.standard_normal((k, 4 * k)), rng.standard_normal(4 * k))
    b[k:2 * k] = 50.0
    x, h0, c0 = rng.standard_normal(d), rng.standard_normal(k), rng.standard_normal(k)
    _, c = lstm_cell(Tensor(x), Tensor(h0), Tensor(c0), Tensor(w_ih), Tensor(w_hh), Tensor(b))
    z = x @ w_ih + h0 @ w_hh + b
    i = 1 / (1 + np.exp(-z[:k]))
    g = np.tanh(z[2 * k:3 * k])
    np.testing.assert_allclose(c.data, c0 + i * g, atol=1e-12)


def test_lstm_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    d, k = 4, 3
    x, h0, c0 = rand(rng, 2, d), rand(rng, 2, k), rand(rng, 2, k)
    w_ih, w_hh, b = lstm_params(rng, d, k)

    def f():
        h, c = lstm_cell(x, h0, c0, w_ih, w_hh, b)
        h2, c2 = lstm_cell(h.tanh() @ Tensor(np.ones((k, d))), h, c, w_ih, w_hh, b, mask=np.array([True, False]))
        return h.sum() + (h2 * c2).sum()

    errors = check_gradients(f, {"x": x, "h0": h0, "c0": c0, "w_ih": w_ih, "w_hh": w_hh, "b": b})
    assert max(errors.values()) < 1e-4


def test_lstm_mask_keeps_previous_state():
    rng = np.random.default_rng(12)
    w_ih, w_hh, b = lstm_params(rng, 2, 3)
    h0, c0 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    h, c = lstm_cell(Tensor(rng.standard_normal((2, 2))), Tensor(h0), Tensor(c0), w_ih, w_hh, b,
                     mask=np.array([False, True]))
    assert np.array_equal(h.data[0], h0[0]) and np.array_equal(c.data[0], c0[0])
    assert not np.array_equal(h.data[1], h0[1])


def test_lstm_shape_mismatch():
    rng = np.random.default_rng(0)
    w_ih, w_hh, b = lstm_params(rng, 3, 2)
    with pytest.raises(DimensionError):
        lstm_cell(Tensor(np.ones(4)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), w_ih, w_hh, b)


# ----------------------------------------------------------------------------- cross-entropy

def test_uniform_logits_give_log_classes():
    loss = softmax_cross_entropy(Tensor(np.zeros((4, 11))), np.array([0, 3, 10, 5]))
    assert loss.item() == pytest.approx(math.log(11), abs=1e-12)
    assert math.log(11) == pytest.approx(2.3979, abs=1e-4)


def test_margin_drives_loss_to_zero():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((2, 11))
        logits[0, 2] = margin
        logits[1, 7] = margin
        losses.append(softmax_cross_entropy(Tensor(logits), np.array([2, 7])).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-40


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(13)
    logits = rng.standard_normal((5, 11)) * 3
    labels = rng.integers(0, 11, size=5)
    oracle = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    assert softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(oracle, abs=1e-10)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(14)
    logits = rand(rng, 5, 11)
    labels = rng.integers(0, 11, size=5)
    assert check_gradients(lambda: softmax_cross_entropy(logits, labels), {"l": logits})["l"] < 1e-6


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 2**16))
def test_cross_entropy_row_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 11))
    labels = rng.integers(0, 11, size=4)
    shifts = np.array([shift, -shift, 0.5 * shift, 0.0])[:, None]
    a = softmax_cross_entropy(Tensor(logits), labels).item()
    b = softmax_cross_entropy(Tensor(logits + shifts), labels).item()
    assert abs(a - b) < 1e-10


def test_cross_entropy_invalid_label():
    with pytest.raises(InvalidLabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 11))), np.array([0, 11]))
    with pytest.raises(InvalidLabelError):
        softmax_cross_entropy(Tensor(np.zeros((1, 11))), np.array([-1]))


# ----------------------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    adam_step([p], [np.zeros(3)], AdamState())
    assert np.array_equal(p, before)


def test_adam_first_step_moves_by_learning_rate():
    p = np.zeros(4)
    g = np.array([0.3, -2.0, 7.0, 1e-3])
    state = adam_step([p], [g], AdamState())
    # m_hat = g, v_hat = g^2  ->  update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p, -0.001 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert state.step == 1


def test_adam_defaults_and_step_count():
    state = AdamState()
    assert (state.lr, state.beta1, state.beta2, state.eps) == (0.001, 0.9, 0.999, 1e-8)
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([w])
    for expected in range(1, 4):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
        assert opt.state.step == expected
        assert opt.state.m[0].shape == w.shape


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [np.zeros(2)], AdamState())


# ----------------------------------------------------------------------------- checkpoints & determinism

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(15)
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "c": rng.standard_normal(())}
    manifest = save_checkpoint(arrays, tmp_path / "ck", extra={"note": "x"})
    loaded, extra = load_checkpoint(manifest)
    assert extra == {"note": "x"}
    for name, arr in arrays.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_tape_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = rand(rng, 1, 4, 4, 4)
        w, b = rand(rng, 2, 1, 3, 3, 3), rand(rng, 2)
        loss = maxpool3d(conv3d(x, w, b).relu()).sum()
        loss.backward()
        return loss.item(), w.grad.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_numeric_gradient_subset_and_relative_error():
    w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    g = numeric_gradient(lambda: (w * w).sum(), w, indices=[(0, 1)])
    assert g[0, 1] == pytest.approx(4.0, abs=1e-6) and g[0, 0] == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
