import numpy as np
import pytest

from niff import freqconv as fc
from niff.layers import MissingForwardState
from niff.synthesis import NiffMlp, make_grid, preset, synthesize
from oracles import (
    central_difference,
    circconv,
    circconv_fast,
    kernel_from_bank,
    loop_conv2d,
    random_indices,
    rel_error,
)


def random_bank(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def spectrum_of_kernel(k):
    """Shifted spectrum of a spatial kernel whose origin is index (0, 0)."""
    return np.fft.fftshift(np.fft.fft2(k), axes=(-2, -1))


# ----------------------------------------------------------------- depthwise

def test_depthwise_identity_bank(rng):
    x = rng.standard_normal((2, 3, 7, 8)).astype(np.float32)
    y, _, _ = fc.depthwise_forward(x, np.ones((3, 7, 8), np.complex64))
    np.testing.assert_allclose(y, x, atol=1e-6)


def test_depthwise_shift_theorem(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    k = np.zeros((6, 6))
    k[0, 1] = 1.0
    bank = np.stack([spectrum_of_kernel(k)] * 2)
    y, _, _ = fc.depthwise_forward(x, bank)
    np.testing.assert_allclose(y, np.roll(x, 1, axis=-1), atol=1e-12)


def test_depthwise_matches_circular_convolution(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    bank = random_bank(rng, 2, 8, 8)
    y, _, _ = fc.depthwise_forward(x, bank)
    for c in range(2):
        expected = circconv(x[0, c], kernel_from_bank(bank[c]))
        assert np.max(np.abs(y[0, c] - expected)) < 1e-10


def test_niff_depthwise_uses_synthesized_bank(rng):
    mlp = preset("cifar_small", 3, "silu", rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 5, 6))
    y = fc.niff_depthwise(x, mlp)
    bank = synthesize(mlp, make_grid(5, 6)).data
    for b in range(2):
        for c in range(3):
            np.testing.assert_allclose(y[b, c], circconv_fast(x[b, c], kernel_from_bank(bank[c])), atol=1e-10)


def test_depthwise_channel_mismatch(rng):
    with pytest.raises(ValueError):
        fc.niff_depthwise(rng.standard_normal((1, 2, 4, 4)), preset("cifar_small", 3, rng=0))


# ---------------------------------------------------------------------- full

def test_full_single_input_reduces_to_depthwise(rng):
    x = rng.standard_normal((2, 1, 6, 7))
    bank = random_bank(rng, 4, 1, 6, 7)
    y_full, _, _ = fc.full_forward(x, bank)
    for q in range(4):
        y_dw, _, _ = fc.depthwise_forward(x, bank[q])
        np.testing.assert_allclose(y_full[:, q], y_dw[:, 0], atol=1e-14)


def test_full_zero_bank(rng):
    y, _, _ = fc.full_forward(rng.standard_normal((2, 2, 5, 5)), np.zeros((3, 2, 5, 5), complex))
    assert not y.any()


def test_full_matches_oracle(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    bank = random_bank(rng, 3, 2, 6, 6)
    y, _, _ = fc.full_forward(x, bank)
    for b in range(2):
        for q in range(3):
            expected = sum(circconv(x[b, p], kernel_from_bank(bank[q, p])) for p in range(2))
            assert np.max(np.abs(y[b, q] - expected)) < 1e-10


def test_niff_full_reshape_order(rng):
    mlp = NiffMlp([rng.standard_normal((12, 2))], [rng.standard_normal(12)])
    x = rng.standard_normal((1, 2, 5, 5))
    y = fc.niff_full(x, mlp)
    bank = synthesize(mlp, make_grid(5, 5)).data  # 6 filters, index q * C_p + p
    expected = circconv_fast(x[0, 0], kernel_from_bank(bank[2])) + circconv_fast(x[0, 1], kernel_from_bank(bank[3]))
    np.testing.assert_allclose(y[0, 1], expected, atol=1e-10)


def test_niff_full_bad_channel_count(rng):
    with pytest.raises(ValueError):
        fc.niff_full(rng.standard_normal((1, 4, 5, 5)), preset("cifar_small", 6, rng=0))


# ---------------------------------------------------------------- decomposed

def test_decomposed_identity_mix_equals_depthwise(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    bank = random_bank(rng, 3, 6, 5)
    y_dec, _, _ = fc.decomposed_forward(x, bank, np.eye(3))
    y_dw, _, _ = fc.depthwise_forward(x, bank)
    np.testing.assert_allclose(y_dec, y_dw, atol=1e-10)


def test_decomposed_identity_bank_equals_spatial_1x1(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    W = rng.standard_normal((4, 3))
    y, _, _ = fc.decomposed_forward(x, np.ones((3, 6, 5), complex), W)
    np.testing.assert_allclose(y, np.einsum("oc,bchw->bohw", W, x), atol=1e-10)


def test_decomposed_stepwise_oracle(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    bank = random_bank(rng, 3, 7, 6)
    W = rng.standard_normal((2, 3))
    bias = rng.standard_normal(2)
    y, _, _ = fc.decomposed_forward(x, bank, W, bias)
    spec = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
    filtered = spec * bank[None]
    mixed = np.einsum("oc,bchw->bohw", W, filtered)
    expected = np.real(np.fft.ifft2(np.fft.ifftshift(mixed, axes=(-2, -1)))) + bias[None, :, None, None]
    assert np.max(np.abs(y - expected)) < 1e-10


def test_full_factorized_equals_decomposed(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    m_hat = random_bank(rng, 3, 6, 6)
    W = rng.standard_normal((4, 3))
    y_full, _, _ = fc.full_forward(x, W[:, :, None, None] * m_hat[None])
    y_dec, _, _ = fc.decomposed_forward(x, m_hat, W)
    np.testing.assert_allclose(y_full, y_dec, atol=1e-10)


# ----------------------------------------------------------------- pointwise

def test_pointwise_identity(rng):
    x = rng.standard_normal((2, 4, 7, 7)).astype(np.float32)
    y = fc.freq_pointwise(x, fc.ChannelMix(np.eye(4, dtype=np.float32)))
    np.testing.assert_allclose(y, x, atol=1e-6)


def test_pointwise_equals_spatial(rng):
    x = rng.standard_normal((3, 4, 9, 5))
    W = rng.standard_normal((6, 4))
    y = fc.freq_pointwise(x, fc.ChannelMix(W))
    expected = np.zeros((3, 6, 9, 5))
    for b in range(3):
        for i in range(9):
            for j in range(5):
                expected[b, :, i, j] = W @ x[b, :, i, j]
    assert np.max(np.abs(y - expected)) < 1e-10


def test_pointwise_bias_only(rng):
    b = np.array([1.5, -2.0])
    y = fc.freq_pointwise(rng.standard_normal((2, 3, 4, 4)), fc.ChannelMix(np.zeros((2, 3)), b))
    np.testing.assert_allclose(y, np.broadcast_to(b[None, :, None, None], y.shape), atol=1e-12)


# ------------------------------------------------------------------- stride 2

def test_stride2_unit_1x1(rng):
    x = rng.standard_normal((2, 1, 7, 6))
    y = fc.spatial_conv_stride2(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(y, x[:, :, ::2, ::2])
    assert y.shape[2:] == (4, 3)


def test_stride2_delta_3x3(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1
    np.testing.assert_allclose(fc.spatial_conv_stride2(x, k), x[:, :, ::2, ::2], atol=1e-15)


@pytest.mark.parametrize("h,w", [(8, 8), (7, 9)])
def test_stride2_loop_oracle(rng, h, w):
    x = rng.standard_normal((2, 3, h, w))
    k = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(fc.spatial_conv_stride2(x, k), loop_conv2d(x, k, 2), atol=1e-12)


def test_stride2_rejects_even_kernel(rng):
    with pytest.raises(ValueError):
        fc.spatial_conv_stride2(rng.standard_normal((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))


# ------------------------------------------------------------------ backward

def f64_layers(rng):
    """One instance of every conv layer, double precision, random parameters."""
    def mlp(c, name="cifar_small", act="silu"):
        m = preset(name, c, act, rng=rng, dtype=np.float64)
        for b in m.biases:
            b[:] = rng.uniform(-0.5, 0.5, b.shape)
        return m

    return {
        "niff_depthwise": fc.NiffDepthwise(3, mlp=mlp(3)),
        "niff_full": fc.NiffFull(3, 2, mlp=mlp(6, "imagenet_light", "relu")),
        "niff_decomposed": fc.NiffDecomposed(3, 4, rng=rng, dtype=np.float64, bias=True,
                                             mlp=mlp(3, "imagenet_large", "gelu")),
        "freq_pointwise": fc.FreqPointwise(3, 5, rng=rng, dtype=np.float64, bias=True),
        "spatial_stride2": fc.SpatialConv(3, 2, 3, stride=2, rng=rng, dtype=np.float64),
        "spatial": fc.SpatialConv(3, 2, 5, rng=rng, dtype=np.float64),
        "spatial_depthwise": fc.SpatialDepthwise(3, 3, rng=rng, dtype=np.float64),
        "spatial_pointwise": fc.SpatialPointwise(3, 2, rng=rng, dtype=np.float64, bias=True),
    }


def gradient_check(layer, x, rng, n_coords=50):
    """Worst relative error between backward and central differences."""
    y = layer.forward(x)
    r = rng.standard_normal(y.shape)
    dx = layer.backward(r)

    def loss():
        return np.sum(layer.forward(x, train=False) * r)

    worst = 0.0
    for idx in random_indices(rng, x.shape, n_coords):
        worst = max(worst, rel_error(central_difference(loss, x, idx), dx[idx]))
    for name, p in layer.params.items():
        for idx in random_indices(rng, p.shape, n_coords):
            worst = max(worst, rel_error(central_difference(loss, p, idx), layer.grads[name][idx]))
    return worst


@pytest.mark.parametrize("kind", ["niff_depthwise", "niff_full", "niff_decomposed", "freq_pointwise",
                                  "spatial_stride2", "spatial", "spatial_depthwise", "spatial_pointwise"])
def test_backward_finite_differences(kind):
    rng = np.random.default_rng(99)
    layer = f64_layers(rng)[kind]
    x = rng.standard_normal((2, 3, 6, 6))
    assert gradient_check(layer, x, rng) < 1e-4


@pytest.mark.parametrize("kind", ["niff_depthwise", "niff_full", "niff_decomposed", "freq_pointwise",
                                  "spatial_stride2"])
def test_zero_cotangent(kind):
    rng = np.random.default_rng(5)
    layer = f64_layers(rng)[kind]
    y = layer.forward(rng.standard_normal((2, 3, 6, 6)))
    dx = layer.backward(np.zeros_like(y))
    assert not dx.any()
    assert all(not g.any() for g in layer.grads.values())


def test_identity_bank_adjoint(rng):
    layer = fc.NiffDepthwise(2, rng=0, dtype=np.float64)
    layer.bank_override = np.ones((2, 5, 5), complex)
    layer.forward(rng.standard_normal((3, 2, 5, 5)))
    dy = rng.standard_normal((3, 2, 5, 5))
    np.testing.assert_allclose(layer.backward(dy), dy, atol=1e-12)


def test_backward_without_forward():
    with pytest.raises(MissingForwardState):
        fc.FreqPointwise(2, 2, rng=0).backward(np.zeros((1, 2, 3, 3)))


def test_eval_bank_cache(rng):
    layer = fc.NiffDepthwise(2, rng=0, dtype=np.float64)
    layer.cache_banks = True
    x = rng.standard_normal((1, 2, 6, 6))
    y1 = layer.forward(x, train=False)
    assert (6, 6) in layer._bank_cache
    np.testing.assert_array_equal(layer.forward(x, train=False), y1)
    layer.forward(x, train=True)
    assert not layer._bank_cache


# ------------------------------------------------------- half-spectrum path

NIFF_FREQ_KINDS = ["niff_depthwise", "niff_full", "niff_decomposed", "freq_pointwise"]


@pytest.mark.parametrize("kind", NIFF_FREQ_KINDS)
@pytest.mark.parametrize("size", [(6, 6), (5, 7), (7, 4)])
def test_half_path_matches_complex_path(kind, size):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3) + size)
    results = {}
    for path in fc.PATHS:
        layer = f64_layers(np.random.default_rng(11))[kind]
        layer.spectral_path = path
        layer.track_residue = True
        y = layer.forward(x)
        dx = layer.backward(np.random.default_rng(4).standard_normal(y.shape))
        results[path] = (y, dx, dict(layer.grads), layer.last_residue)
    (y0, dx0, g0, r0), (y1, dx1, g1, r1) = results["complex"], results["half"]
    np.testing.assert_allclose(y1, y0, atol=1e-12)
    np.testing.assert_allclose(dx1, dx0, atol=1e-12)
    for name in g0:
        np.testing.assert_allclose(g1[name], g0[name], atol=1e-11, err_msg=name)
    assert r1 == pytest.approx(r0, rel=1e-9, abs=1e-14)


def test_half_path_reports_no_residue_unless_asked(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    bank = random_bank(rng, 2, 6, 6)
    _, _, r_complex = fc.depthwise_forward(x, bank, path="complex")
    _, _, r_half = fc.depthwise_forward(x, bank, path="half")
    _, _, r_half_tracked = fc.depthwise_forward(x, bank, residue=True, path="half")
    assert r_complex > 1e-3 and r_half == 0.0
    assert r_half_tracked == pytest.approx(r_complex, rel=1e-12)


def test_unknown_path_rejected(rng):
    with pytest.raises(ValueError, match="spectral path"):
        fc.depthwise_forward(rng.standard_normal((1, 1, 4, 4)), np.ones((1, 4, 4), complex), path="fast")
