import numpy as np
import pytest

from cprgcn.conditions import (
    ConditionConfig,
    Volume,
    bilstm_summarize,
    cnn_encode,
    encode_segments,
    extract_cubes,
    init_condition_params,
    normalize_intensity,
    read_volume,
    resample_volume,
    write_volume,
)
from cprgcn.geometry import DegenerateInputError
from cprgcn.tensor import DimensionError, check_gradients, tensor

TOY = ConditionConfig(gamma=4, channels=(2, 3, 2), lstm_layers=2, hidden=3)


# --------------------------------------------------------------------------- volumes


def test_resample_identity_at_target_spacing():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(7, 5, 6)), (0.5, 0.5, 0.5))
    out = resample_volume(v, 0.5)
    assert np.abs(out.data - v.data).max() < 1e-9


def test_resample_constant():
    out = resample_volume(Volume(np.full((4, 5, 3), 2.5), (1.0, 0.7, 1.3)), 0.5)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-12)
    assert out.dims == (8, 7, 8)


def test_resample_ramp_slope_halves():
    x = np.arange(10.0)
    v = Volume(np.broadcast_to(3.0 * x[:, None, None], (10, 4, 4)).copy(), (1.0, 1.0, 1.0))
    out = resample_volume(v, 0.5)
    assert out.dims[0] == 20
    # trilinear oracle: exact halved slope inside the sampled range
    np.testing.assert_allclose(np.diff(out.data[:19, 0, 0]), 1.5, atol=1e-12)
    assert out.dims[0] * out.spacing[0] == pytest.approx(v.dims[0] * v.spacing[0])


def test_resample_errors():
    with pytest.raises(DegenerateInputError):
        resample_volume(Volume(np.zeros((0, 3, 3))), 0.5)
    with pytest.raises(ValueError):
        resample_volume(Volume(np.zeros((3, 3, 3))), 0.0)


def test_normalize_intensity():
    rng = np.random.default_rng(1)
    v = normalize_intensity(Volume(rng.normal(5, 3, size=(6, 6, 6))))
    assert v.data.mean() == pytest.approx(0, abs=1e-12)
    assert v.data.std() == pytest.approx(1)


def test_extract_cube_center_constant():
    v = Volume(np.full((40, 40, 40), 7.0))
    cubes = extract_cubes(v, [[20, 20, 20]], gamma=12)
    assert cubes.shape == (1, 1, 24, 24, 24)
    assert np.all(cubes == 7.0)


def test_extract_cube_corner_fill():
    v = Volume(np.full((30, 30, 30), 7.0))
    cube = extract_cubes(v, [[0, 0, 0]], gamma=12, fill=-1.0)[0, 0]
    assert np.all(cube[12:, 12:, 12:] == 7.0)
    assert np.all(cube[:12] == -1.0) and np.all(cube[:, :12] == -1.0)
    assert np.all(extract_cubes(v, [[100, 0, 0]], gamma=4, fill=-2.0) == -2.0)


def test_extract_cube_alignment():
    v = Volume(np.arange(20 ** 3, dtype=float).reshape(20, 20, 20))
    cube = extract_cubes(v, [[10.2, 9.8, 10.0]], gamma=3)[0, 0]
    np.testing.assert_array_equal(cube, v.data[7:13, 7:13, 7:13])


def test_volume_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    v = Volume(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.5, 0.6, 0.7))
    head = write_volume(tmp_path / "vol", v)
    back = read_volume(head)
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing
    assert (tmp_path / "vol.raw").stat().st_size == 5 * 6 * 7 * 4


# --------------------------------------------------------------------------- CNN


def test_cnn_full_size_shape_chain():
    cfg = ConditionConfig()
    assert cfg.cube_side == 24 and cfg.feature_dim == 64 * 3 * 3 * 3 == 1728
    params = init_condition_params(cfg, np.random.default_rng(0))
    out = cnn_encode(np.random.default_rng(1).normal(size=(1, 1, 24, 24, 24)), params, cfg)
    assert out.shape == (1, 1728)
    assert np.all(np.isfinite(out.data))


def test_cnn_zero_cube_zero_bias():
    params = init_condition_params(TOY, np.random.default_rng(0))
    for k in params:
        if k.startswith("cnn") and k.endswith(".b"):
            params[k].data[:] = 0.0
    out = cnn_encode(np.zeros((2, 1, 8, 8, 8)), params, TOY)
    assert np.all(out.data == 0.0)


def test_cnn_weight_sharing():
    params = init_condition_params(TOY, np.random.default_rng(0))
    cube = np.random.default_rng(3).normal(size=(1, 1, 8, 8, 8))
    both = cnn_encode(np.concatenate([cube, cube]), params, TOY).data
    np.testing.assert_array_equal(both[0], both[1])


def test_cnn_wrong_shape():
    params = init_condition_params(TOY, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        cnn_encode(np.zeros((1, 1, 6, 6, 6)), params, TOY)


def test_bad_cube_side_rejected():
    with pytest.raises(ValueError):
        init_condition_params(ConditionConfig(gamma=5), np.random.default_rng(0))


# --------------------------------------------------------------------------- BiLSTM


def test_bilstm_output_dim_full_size():
    cfg = ConditionConfig()
    params = init_condition_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    steps = [tensor(rng.normal(size=(2, 1728))) for _ in range(3)]
    y = bilstm_summarize(steps, [3, 2], params, cfg)
    assert y.shape == (2, 256)
    assert np.all(np.isfinite(y.data))


def _manual_lstm(xs, w_ih, w_hh, b):
    # independent oracle: plain numpy LSTM over one unpadded sequence
    k = w_hh.shape[0]
    h, c = np.zeros(k), np.zeros(k)
    hs = []
    for x in xs:
        z = x @ w_ih + h @ w_hh + b
        sig = lambda a: 1 / (1 + np.exp(-a))
        i, f, g, o = sig(z[:k]), sig(z[k:2 * k]), np.tanh(z[2 * k:3 * k]), sig(z[3 * k:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
    return hs


def test_bilstm_matches_manual_oracle():
    cfg = ConditionConfig(gamma=4, channels=(2,), lstm_layers=2, hidden=4)
    params = {k: v.data for k, v in init_condition_params(cfg, np.random.default_rng(5)).items()}
    xs = np.random.default_rng(6).normal(size=(5, cfg.feature_dim))
    seq = list(xs)
    for layer in range(2):
        p = lambda d, n: params[f"lstm.{layer}.{d}.{n}"]
        f = _manual_lstm(seq, p("fwd", "w_ih"), p("fwd", "w_hh"), p("fwd", "b"))
        bk = _manual_lstm(seq[::-1], p("bwd", "w_ih"), p("bwd", "w_hh"), p("bwd", "b"))[::-1]
        seq = [np.concatenate([a, b]) for a, b in zip(f, bk)]
    expect = np.concatenate([f[-1], bk[0]])
    tparams = init_condition_params(cfg, np.random.default_rng(5))
    got = bilstm_summarize([tensor(x[None]) for x in xs], [5], tparams, cfg).data[0]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_bilstm_length_one():
    params = init_condition_params(TOY, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, TOY.feature_dim))
    y = bilstm_summarize([tensor(x)], [1], params, TOY)
    assert y.shape == (1, 2 * TOY.hidden)


def test_bilstm_padding_matches_unbatched():
    cfg = ConditionConfig()
    params = init_condition_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 1728)), rng.normal(size=(7, 1728))
    padded = np.zeros((2, 7, 1728))
    padded[0, :3], padded[1] = a, b
    batched = bilstm_summarize([tensor(padded[:, t]) for t in range(7)], [3, 7], params, cfg).data
    solo_a = bilstm_summarize([tensor(a[t:t + 1]) for t in range(3)], [3], params, cfg).data
    solo_b = bilstm_summarize([tensor(b[t:t + 1]) for t in range(7)], [7], params, cfg).data
    assert np.abs(batched[0] - solo_a[0]).max() < 1e-10
    assert np.abs(batched[1] - solo_b[0]).max() < 1e-10


def test_bilstm_empty_rejected():
    params = init_condition_params(TOY, np.random.default_rng(0))
    with pytest.raises(DegenerateInputError):
        bilstm_summarize([], [], params, TOY)
    with pytest.raises(DegenerateInputError):
        encode_segments([np.zeros((0, 1, 8, 8, 8))], params, TOY)


def test_encode_segments_matches_per_segment():
    params = init_condition_params(TOY, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    seqs = [rng.normal(size=(n, 1, 8, 8, 8)) for n in (2, 5, 1)]
    joint = encode_segments(seqs, params, TOY).data
    for i, s in enumerate(seqs):
        assert np.abs(encode_segments([s], params, TOY).data[0] - joint[i]).max() < 1e-10


def test_end_to_end_gradient_through_cnn_and_lstm():
    params = init_condition_params(TOY, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    seqs = [rng.normal(size=(2, 1, 8, 8, 8)), rng.normal(size=(1, 1, 8, 8, 8))]
    proj = rng.normal(size=(2 * TOY.hidden,))

    def loss():
        y = encode_segments(seqs, params, TOY)
        s = (y * proj).sum(axis=1)
        return (s * s).sum()

    errs = check_gradients(loss, params, h=1e-6)
    assert max(errs.values()) < 1e-3, errs
