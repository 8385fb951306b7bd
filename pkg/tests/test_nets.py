import numpy as np
import pytest

from congeal import autodiff, nets, tensorio
from congeal.nets import (
    Conv2d,
    Decoder,
    Encoder,
    Linear,
    LocNet,
    count_params,
    init_models,
    load_checkpoint,
    save_checkpoint,
)

from oracles import check_grads, rand_away_from_zero

K = 25  # channel count used for budget checks


def test_autoencoder_parameter_budget():
    enc, dec, _ = init_models(K, seed=0)
    ae = count_params(enc) + count_params(dec)
    assert 2_000 <= ae <= 4_000, ae


def test_localizer_parameter_budget():
    _, _, loc = init_models(K, seed=0)
    n = count_params(loc)
    assert 10_000 <= n <= 16_000, n


def test_total_parameter_budget():
    enc, dec, loc = init_models(K, seed=0)
    total = count_params(enc) + count_params(dec) + count_params(loc)
    assert total <= 20_000, total


def test_localizer_head_starts_at_zero(rng):
    _, _, loc = init_models(K, seed=3)
    x = autodiff.tensor(rng.standard_normal((4, 3, 16, 16)).astype(np.float32))
    out = loc(x)
    assert out.shape == (4, 8)
    assert np.all(out.data == 0.0)


def test_shapes_through_the_autoencoder(rng):
    enc, dec, _ = init_models(K, seed=1)
    x = autodiff.tensor(rng.standard_normal((2, K, 12, 10)).astype(np.float32))
    z = enc(x)
    assert z.shape == (2, 3, 12, 10)
    back = dec(z)
    assert back.shape == (2, K, 12, 10)


def test_identity_kernel_convolution(rng):
    conv = Conv2d(2, 2, 3, pad=1)
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    conv.weight.data = w
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    out = conv(autodiff.tensor(x))
    assert np.allclose(out.data, x, atol=1e-6)


def test_sum_kernel_on_constant_input():
    conv = Conv2d(1, 1, 3, pad=1)
    conv.weight.data = np.ones((1, 1, 3, 3), dtype=np.float32)
    x = np.full((1, 1, 5, 5), 2.0, dtype=np.float32)
    out = conv(autodiff.tensor(x)).data[0, 0]
    assert out[2, 2] == 18.0  # interior: 9 taps
    assert out[0, 2] == 12.0  # edge: 6 taps
    assert out[0, 0] == 8.0  # corner: 4 taps


def test_initialization_bounds(rng):
    conv = Conv2d(4, 8, 3, rng=rng)
    bound = np.sqrt(6.0 / (4 * 9))
    assert np.max(np.abs(conv.weight.data)) <= bound
    assert np.all(conv.bias.data == 0.0)
    lin = Linear(10, 5, rng=rng)
    assert np.max(np.abs(lin.weight.data)) <= np.sqrt(6.0 / 10)


def test_init_is_deterministic_per_seed():
    a = init_models(K, seed=7)
    b = init_models(K, seed=7)
    c = init_models(K, seed=8)
    for ma, mb in zip(a, b):
        for name, t in ma.params().items():
            assert np.array_equal(t.data, mb.params()[name].data), name
    assert not np.array_equal(a[0].conv1.weight.data, c[0].conv1.weight.data)


def test_parameter_names_are_namespaced():
    enc, dec, loc = init_models(K, seed=0)
    names = set(enc.params()) | set(dec.params()) | set(loc.params())
    assert names == {
        "enc.conv1.weight", "enc.conv1.bias", "enc.conv2.weight", "enc.conv2.bias",
        "dec.conv1.weight", "dec.conv1.bias", "dec.conv2.weight", "dec.conv2.bias",
        "loc.conv1.weight", "loc.conv1.bias", "loc.conv2.weight", "loc.conv2.bias",
        "loc.head.weight", "loc.head.bias",
    }


def test_checkpoint_round_trip(tmp_path, rng):
    enc, dec, loc = init_models(K, seed=5)
    loc.head.weight.data = rng.standard_normal((8, nets.LOC_WIDTH)).astype(np.float32)
    path = tmp_path / "ck.sjwt"
    save_checkpoint(path, enc, dec, loc)
    enc2, dec2, loc2 = init_models(K, seed=99)
    load_checkpoint(path, enc2, dec2, loc2)
    for m1, m2 in zip((enc, dec, loc), (enc2, dec2, loc2)):
        for name, t in m1.params().items():
            assert np.array_equal(t.data, m2.params()[name].data), name


def test_checkpoint_missing_tensor_is_diagnosed(tmp_path):
    enc, dec, loc = init_models(K, seed=0)
    path = tmp_path / "enc_only.sjwt"
    save_checkpoint(path, enc)
    with pytest.raises(tensorio.TensorFormatError, match="missing tensor"):
        load_checkpoint(path, enc, dec, loc)


def test_checkpoint_shape_mismatch_is_diagnosed(tmp_path):
    enc, dec, loc = init_models(K, seed=0)
    path = tmp_path / "k25.sjwt"
    save_checkpoint(path, enc, dec, loc)
    other_enc, _, _ = init_models(K + 1, seed=0)
    with pytest.raises(tensorio.TensorFormatError, match="shape"):
        load_checkpoint(path, other_enc)


def test_encoder_gradients_match_finite_differences(rng):
    enc = Encoder(4, rng=rng)
    x0 = rand_away_from_zero(rng, (2, 4, 6, 6))
    w1, b1 = enc.conv1.weight.data.astype(np.float64), rand_away_from_zero(rng, 7, 0.05, 0.1)
    w2, b2 = enc.conv2.weight.data.astype(np.float64), rand_away_from_zero(rng, 3, 0.05, 0.1)

    def build(x, wa, ba, wb, bb):
        h = autodiff.relu(autodiff.conv2d(x, wa, ba, pad=1))
        return autodiff.sum_squares(autodiff.conv2d(h, wb, bb, pad=1))

    check_grads(build, [x0, w1, b1, w2, b2], tol=1e-4, coords=3, step=1e-6, seed=4)


def test_localizer_gradients_match_finite_differences(rng):
    x0 = rand_away_from_zero(rng, (2, 3, 8, 8))
    loc_rng = np.random.default_rng(11)
    w1 = np.asarray(Conv2d(3, 5, 5, rng=loc_rng).weight.data, dtype=np.float64)
    b1 = rand_away_from_zero(rng, 5, 0.05, 0.1)
    wh = rng.normal(size=(8, 5))
    bh = rng.normal(size=8)

    def build(x, w, b, hw, hb):
        h = autodiff.relu(autodiff.conv2d(x, w, b, stride=2, pad=2))
        return autodiff.sum_squares(autodiff.linear(autodiff.global_avg_pool(h), hw, hb))

    check_grads(build, [x0, w1, b1, wh, bh], tol=1e-4, coords=3, step=1e-6, seed=5)


def test_tensor_table_round_trip(tmp_path, rng):
    table = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b.c": rng.standard_normal(7).astype(np.float32),
        "scalarish": np.array([1.5], dtype=np.float32),
    }
    path = tmp_path / "t.sjwt"
    tensorio.save_tensors(path, table)
    back = tensorio.load_tensors(path)
    assert set(back) == set(table)
    for k in table:
        assert np.array_equal(back[k], table[k])


def test_tensor_table_truncation_is_diagnosed(tmp_path, rng):
    path = tmp_path / "t.sjwt"
    tensorio.save_tensors(path, {"x": rng.standard_normal(10).astype(np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(tensorio.TensorFormatError, match="truncated"):
        tensorio.load_tensors(path)
