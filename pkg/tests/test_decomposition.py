import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdci.decomposition import (
    SCALE_SPACE_KERNELS,
    Decomposition,
    decompose,
    dwt_haar_forward,
    dwt_haar_inverse,
    gaussian_kernel,
    haar_conv_layer,
)
from msdci.sampling import basis_matrix
from msdci.tensor_core import ConvLayer, ShapeError, conv2d_forward, make_rng

EXAMPLE = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])


def test_constant_image():
    bands = dwt_haar_forward(np.full((1, 1, 6, 6), 0.3))
    np.testing.assert_allclose(bands[0, 0], 0.6)
    assert not bands[0, 1:].any()


def test_two_by_two_example():
    assert dwt_haar_forward(EXAMPLE).ravel().tolist() == [5.0, -1.0, -2.0, 0.0]


def test_inverse_example():
    bands = np.array([5.0, -1.0, -2.0, 0.0]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(dwt_haar_inverse(bands), EXAMPLE)


def test_inverse_of_zero():
    assert not dwt_haar_inverse(np.zeros((1, 4, 3, 3))).any()


def test_energy_preserved(rng):
    x = rng.standard_normal((1, 1, 32, 32))
    assert abs(np.linalg.norm(dwt_haar_forward(x)) - np.linalg.norm(x)) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_inverse_roundtrip(h, w, seed):
    x = make_rng(seed).standard_normal((2, 1, 2 * h, 2 * w))
    np.testing.assert_allclose(dwt_haar_inverse(dwt_haar_forward(x)), x, atol=1e-10)


def test_inverse_is_adjoint(rng):
    x = rng.standard_normal((1, 1, 8, 8))
    b = rng.standard_normal((1, 4, 4, 4))
    assert np.isclose(np.sum(dwt_haar_forward(x) * b), np.sum(x * dwt_haar_inverse(b)))


def test_odd_extent_rejected():
    with pytest.raises(ShapeError):
        dwt_haar_forward(np.zeros((1, 1, 5, 4)))


def test_inverse_channel_count():
    with pytest.raises(ShapeError):
        dwt_haar_inverse(np.zeros((1, 3, 2, 2)))


def test_haar_layer_matches_transform(rng):
    x = rng.standard_normal((2, 1, 16, 16))
    np.testing.assert_allclose(conv2d_forward(x, haar_conv_layer()), dwt_haar_forward(x),
                               atol=1e-14)


def test_haar_shape_at_256():
    out = decompose(np.zeros((1, 1, 256, 256)), Decomposition.build("haar_dwt"))
    assert out.shape == (1, 4, 128, 128)


def test_identity_passthrough(rng):
    x = rng.random((1, 1, 8, 8))
    np.testing.assert_array_equal(decompose(x, Decomposition.build("identity")), x)


def _delta_bank():
    layers = []
    for k in SCALE_SPACE_KERNELS:
        w = np.zeros((1, 1, k, k))
        w[0, 0, k // 2, k // 2] = 1.0
        layers.append(ConvLayer(w, padding=(k - 1) // 2))
    return Decomposition("scale_space", layers, trainable=True)


def test_scale_space_delta_kernels(rng):
    x = rng.random((1, 1, 12, 12))
    out = decompose(x, _delta_bank())
    assert out.shape == (1, 4, 12, 12)
    for c in range(4):
        np.testing.assert_array_equal(out[:, c : c + 1], x)


@pytest.mark.parametrize("n", [9, 16, 33])
def test_scale_space_preserves_extent(n):
    out = decompose(np.zeros((1, 1, n, n)), Decomposition.build("scale_space"))
    assert out.shape == (1, 4, n, n)


def test_gaussian_init():
    for k in SCALE_SPACE_KERNELS:
        g = gaussian_kernel(k)
        assert g.shape == (k, k) and np.isclose(g.sum(), 1.0)
        assert g.argmax() == (k * k) // 2
        np.testing.assert_allclose(g, g.T)


def test_invariants_enforced():
    with pytest.raises(ValueError):
        Decomposition("haar_dwt", trainable=True)
    with pytest.raises(ValueError):
        Decomposition("scale_space", [ConvLayer(np.zeros((1, 1, 3, 3)), padding=1)])
    with pytest.raises(ValueError):
        Decomposition("wavelet")
    with pytest.raises(ValueError):
        decompose(np.zeros((1, 1, 4, 4)), Decomposition("pyramid_marker"))


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["identity", "haar_dwt", "scale_space"]),
       seed=st.integers(0, 2**32 - 1),
       alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linearity(kind, seed, alpha, beta):
    rng = make_rng(seed)
    d = Decomposition.build(kind)
    if kind == "scale_space":
        for layer in d.layers:
            layer.weights[...] = rng.standard_normal(layer.weights.shape)
    x, z = rng.standard_normal((2, 1, 1, 10, 10))
    lhs = decompose(alpha * x + beta * z, d)
    rhs = alpha * decompose(x, d) + beta * decompose(z, d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_matrix_sparsity_matches_footprints(rng):
    n = 10
    d = Decomposition.build("scale_space")
    for layer in d.layers:
        layer.weights[...] = rng.uniform(0.5, 1.5, layer.weights.shape)  # no zero taps
    mat = basis_matrix(lambda x: decompose(x, d), n)
    rows = mat.reshape(4, n, n, n, n)  # channel, out_i, out_j, in_i, in_j
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for c, k in enumerate(SCALE_SPACE_KERNELS):
        r = k // 2
        for oi in range(n):
            for oj in range(n):
                expected = (np.abs(ii - oi) <= r) & (np.abs(jj - oj) <= r)
                assert np.array_equal(rows[c, oi, oj] != 0, expected)

    haar = basis_matrix(lambda x: decompose(x, Decomposition.build("haar_dwt")), 4)
    for row in haar:
        nz = np.flatnonzero(row).tolist()
        r0, c0 = divmod(nz[0], 4)
        assert nz == [r0 * 4 + c0, r0 * 4 + c0 + 1, (r0 + 1) * 4 + c0, (r0 + 1) * 4 + c0 + 1]
