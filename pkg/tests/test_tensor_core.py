import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from c2former import tensor_core as tc
from c2former.tensor_core import ConvParams

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def conv(c_out, c_in, k, rng, bias=True):
    return ConvParams(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out) if bias else None)


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        p = ConvParams(np.eye(3)[:, :, None, None], np.zeros(3))
        np.testing.assert_array_equal(tc.conv2d(x, p), x)

    @pytest.mark.parametrize("k", [1, 3])
    def test_zero_weight_gives_bias(self, rng, k):
        x = rng.normal(size=(1, 2, 4, 4))
        p = ConvParams(np.zeros((3, 2, k, k)), np.array([1.5, -2.0, 0.25]))
        y = tc.conv2d(x, p)
        for o, b in enumerate(p.bias):
            assert np.all(y[:, o] == b)

    def test_hand_dot_product(self):
        x = np.array([3.0, 5.0]).reshape(1, 2, 1, 1)
        p = ConvParams(np.array([1.0, -1.0]).reshape(1, 2, 1, 1))
        assert tc.conv2d(x, p)[0, 0, 0, 0] == -2.0

    def test_3x3_matches_loop(self, rng):
        x = rng.normal(size=(1, 2, 4, 3))
        p = conv(2, 2, 3, rng)
        expected = np.zeros((1, 2, 4, 3))
        for o in range(2):
            for h in range(4):
                for w in range(3):
                    acc = p.bias[o]
                    for i in range(2):
                        for dh in range(3):
                            for dw in range(3):
                                hh, ww = h + dh - 1, w + dw - 1
                                if 0 <= hh < 4 and 0 <= ww < 3:
                                    acc += p.weight[o, i, dh, dw] * x[0, i, hh, ww]
                    expected[0, o, h, w] = acc
        np.testing.assert_allclose(tc.conv2d(x, p), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3])
    def test_linearity(self, rng, k):
        p = conv(3, 2, k, rng, bias=False)
        x, z = rng.normal(size=(2, 1, 2, 5, 5))
        a, b = 0.7, -1.3
        np.testing.assert_allclose(tc.conv2d(a * x + b * z, p),
                                   a * tc.conv2d(x, p) + b * tc.conv2d(z, p), atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            tc.conv2d(rng.normal(size=(1, 3, 2, 2)), conv(2, 2, 1, rng))

    def test_unsupported_kernel(self, rng):
        with pytest.raises(ValueError, match="unsupported kernel"):
            tc.conv2d(rng.normal(size=(1, 2, 4, 4)), conv(2, 2, 5, rng))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
        pos = np.array([0.0, 1.0, 3.5])
        np.testing.assert_array_equal(tc.relu(pos), pos)
        assert not tc.relu(-np.arange(1.0, 5.0)).any()

    def test_scaled_tanh(self):
        assert tc.scaled_tanh(np.array(0.0)) == 0.0
        assert abs(tc.scaled_tanh(np.array(50.0)) - 2.0) <= 1e-12
        assert tc.scaled_tanh(np.array(math.atanh(0.5))) == pytest.approx(1.0, abs=1e-15)

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)))
    def test_scaled_tanh_range(self, x):
        y = tc.scaled_tanh(x)
        assert np.all(np.abs(y) <= 2.0)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(tc.softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_hand_ratio(self):
        np.testing.assert_allclose(tc.softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]],
                                   atol=1e-15)

    def test_shift_invariance(self, rng):
        m = rng.normal(size=(4, 6))
        np.testing.assert_allclose(tc.softmax_rows(m + 7.0), tc.softmax_rows(m), atol=1e-12)

    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
    def test_rows_stochastic(self, m):
        s = tc.softmax_rows(m)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s > 0) and np.all(s <= 1)


class TestMatmul:
    def test_identity_and_zero(self, rng):
        a = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(tc.matmul(a, np.eye(4)), a)
        assert not tc.matmul(a, np.zeros((4, 2))).any()

    def test_hand_product(self):
        np.testing.assert_array_equal(tc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1))),
                                      [[3.0], [7.0]])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestGammaReshape:
    def test_index_arithmetic(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        x = np.array([[[a, b]], [[c, d]]])  # C=2, H=1, W=2
        np.testing.assert_array_equal(tc.gamma_reshape(x), [[a, c], [b, d]])

    def test_single_channel_preserves_values(self, rng):
        x = rng.normal(size=(1, 3, 4))
        np.testing.assert_array_equal(tc.gamma_reshape(x)[:, 0], x.ravel())

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    def test_round_trip_bit_exact(self, C, H, W):
        x = np.random.default_rng(C * 100 + H * 10 + W).normal(size=(C, H, W))
        np.testing.assert_array_equal(tc.gamma_inverse(tc.gamma_reshape(x), H, W), x)
        xb = x[None]
        np.testing.assert_array_equal(tc.from_descriptors(tc.to_descriptors(xb), H, W), xb)

    def test_inverse_count_mismatch(self):
        with pytest.raises(ValueError):
            tc.gamma_inverse(np.ones((5, 2)), 2, 2)

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(3, 2, 3, 4))
        d = tc.to_descriptors(x)
        for n in range(3):
            np.testing.assert_array_equal(d[n], tc.gamma_reshape(x[n]))


class TestInstanceStats:
    def test_constant_channel(self):
        mu, sigma = tc.instance_stats(np.full((1, 1, 3, 3), 4.0))
        assert mu[0, 0] == 4.0
        assert sigma[0, 0] == pytest.approx(math.sqrt(tc.EPS), rel=1e-12)

    def test_two_point(self):
        mu, sigma = tc.instance_stats(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
        assert mu[0, 0] == 0.0
        assert sigma[0, 0] == pytest.approx(math.sqrt(1 + tc.EPS), rel=1e-15)

    def test_centering(self, rng):
        y = tc.instance_norm(rng.normal(3.0, 2.0, size=(2, 3, 5, 4)))
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-10)


class TestBilinear:
    def test_corner(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        out = tc.bilinear_sample(x, np.array([[[-1.0, -1.0]]]))
        np.testing.assert_array_equal(out[0, :, 0, 0], x[0, :, 0, 0])

    def test_midpoint(self):
        x = np.array([[[[2.0, 6.0]]]])  # one row: midpoint needs H > 1 for normalization
        x = np.repeat(x, 2, axis=2)
        out = tc.bilinear_sample(x, np.array([[[0.0, -1.0]]]))
        assert out[0, 0, 0, 0] == 4.0

    def test_far_outside_is_zero(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        out = tc.bilinear_sample(x, np.array([[[5.0, 0.0], [0.0, -7.5]]]))
        assert not out.any()

    def test_partial_padding(self):
        x = np.ones((1, 1, 2, 2))
        # W = 2: u maps to pixel (u + 1) / 2, so u = 2 sits half a pixel past the edge
        coords = np.array([[[1.5, -1.0], [2.0, -1.0], [3.0, -1.0]]])
        np.testing.assert_allclose(tc.bilinear_sample(x, coords)[0, 0, 0], [0.75, 0.5, 0.0])

    def test_linear_ramp_exact(self, rng):
        H, W = 5, 7
        yy, xx = np.mgrid[0:H, 0:W]
        x = (0.3 * xx - 1.7 * yy + 2.0)[None, None].astype(float)
        coords = rng.uniform(-0.95, 0.95, size=(6, 6, 2))
        out = tc.bilinear_sample(x, coords)
        px = (coords[..., 0] + 1) / 2 * (W - 1)
        py = (coords[..., 1] + 1) / 2 * (H - 1)
        np.testing.assert_allclose(out[0, 0], 0.3 * px - 1.7 * py + 2.0, atol=1e-12)

    def test_integer_grid_is_exact(self, rng):
        x = rng.normal(size=(2, 3, 7, 7))
        u = 2.0 * np.arange(7) / 6 - 1
        grid = np.stack(np.meshgrid(u, u, indexing="xy"), axis=-1)
        np.testing.assert_array_equal(tc.bilinear_sample(x, grid), x)


class TestDeconv:
    def test_stride_one_equals_conv(self, rng):
        y = rng.normal(size=(2, 3, 4, 4))
        p = conv(5, 3, 1, rng)
        np.testing.assert_array_equal(tc.deconv1x1_stride(y, p, 1), tc.conv2d(y, p))

    def test_placement(self, rng):
        y = rng.normal(size=(1, 2, 3, 3))
        p = ConvParams(np.eye(2)[:, :, None, None], np.zeros(2))
        out = tc.deconv1x1_stride(y, p, 2)
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_array_equal(out[:, :, ::2, ::2], y)
        mask = np.ones((6, 6), bool)
        mask[::2, ::2] = False
        assert not out[:, :, mask].any()

    def test_nonzero_count_exhaustive(self, rng):
        # exhaustive over every 4x4 output for strides 1..4 with zero bias
        for s in range(1, 5):
            Hs = 4 // s
            y = rng.normal(size=(1, 1, Hs, Hs))
            out = tc.deconv1x1_stride(y, ConvParams(np.ones((1, 1, 1, 1))), s, (4, 4))
            assert np.count_nonzero(out[0, 0]) <= Hs * Hs

    def test_bias_only_off_grid(self, rng):
        y = rng.normal(size=(1, 2, 2, 2))
        p = ConvParams(rng.normal(size=(2, 2, 1, 1)), np.array([0.5, -1.0]))
        out = tc.deconv1x1_stride(y, p, 3, (7, 7))
        assert out[0, 0, 6, 6] == 0.5 and out[0, 1, 1, 0] == -1.0

    def test_bad_out_size(self, rng):
        with pytest.raises(ValueError):
            tc.deconv1x1_stride(rng.normal(size=(1, 2, 2, 2)), conv(2, 2, 1, rng), 2, (6, 4))
