import numpy as np
import pytest

from aortaseg import layers

from helpers import central_diff_grad, rel_grad_err


def randn(rng, *shape, dtype=np.float64):
    return rng.standard_normal(shape).astype(dtype)


class TestConv3d:
    def test_zero_kernel_gives_bias(self):
        x = np.ones((1, 1, 4, 4, 2), np.float32)
        k = np.zeros((1, 1, 3, 3, 3), np.float32)
        b = np.array([0.5], np.float32)
        out = layers.conv3d_forward(x, k, b)
        assert out.shape == (1, 1, 4, 4, 2)
        assert np.all(out == 0.5)

    def test_same_padding_shape(self):
        rng = np.random.default_rng(0)
        x = randn(rng, 1, 1, 64, 64, 8, dtype=np.float32)
        k = randn(rng, 32, 1, 3, 3, 3, dtype=np.float32)
        out = layers.conv3d_forward(x, k, np.zeros(32, np.float32))
        assert out.shape == (1, 32, 64, 64, 8)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = randn(rng, 2, 1, 5, 6, 4)
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        out = layers.conv3d_forward(x, k, np.zeros(1))
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 2, 4, 4, 2), np.float32)
        k = np.zeros((3, 4, 3, 3, 3), np.float32)
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4, 2\).*\(3, 4, 3, 3, 3\)"):
            layers.conv3d_forward(x, k, np.zeros(3, np.float32))

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(2)
        x = randn(rng, 1, 2, 4, 4, 3)
        k = randn(rng, 3, 2, 3, 3, 3)
        gx, gk, gb = layers.conv3d_backward(x, k, np.zeros((1, 3, 4, 4, 3)))
        assert not gx.any() and not gk.any() and not gb.any()

    def test_backward_identity_adjoint(self):
        x = np.zeros((1, 1, 3, 3, 3))
        x[0, 0, 1, 1, 1] = 1.0
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        g = np.zeros((1, 1, 3, 3, 3))
        g[0, 0, 1, 1, 1] = 1.0
        gx, _, _ = layers.conv3d_backward(x, k, g)
        np.testing.assert_array_equal(gx, x)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = randn(rng, 1, 2, 5, 5, 3)
        k = randn(rng, 3, 2, 3, 3, 3)
        b = randn(rng, 3)
        w = randn(rng, 1, 3, 5, 5, 3)
        gx, gk, gb = layers.conv3d_backward(x, k, w)

        def j():
            return float(np.sum(w * layers.conv3d_forward(x, k, b)))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4
        assert rel_grad_err(gk, central_diff_grad(j, k)) < 1e-4
        assert rel_grad_err(gb, central_diff_grad(j, b)) < 1e-4


class TestConv1x1:
    def test_is_channel_mixing(self):
        rng = np.random.default_rng(4)
        x = randn(rng, 1, 3, 4, 4, 2)
        k = randn(rng, 2, 3, 1, 1, 1)
        b = randn(rng, 2)
        out = layers.conv1x1_forward(x, k, b)
        ref = np.einsum("oc,ncxyz->noxyz", k[:, :, 0, 0, 0], x) + b.reshape(1, -1, 1, 1, 1)
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = randn(rng, 1, 3, 4, 4, 2)
        k = randn(rng, 2, 3, 1, 1, 1)
        b = randn(rng, 2)
        w = randn(rng, 1, 2, 4, 4, 2)
        gx, gk, gb = layers.conv1x1_backward(x, k, w)

        def j():
            return float(np.sum(w * layers.conv1x1_forward(x, k, b)))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4
        assert rel_grad_err(gk, central_diff_grad(j, k)) < 1e-4
        assert rel_grad_err(gb, central_diff_grad(j, b)) < 1e-4


class TestBatchNorm:
    def test_constant_input_returns_beta(self):
        x = np.ones((2, 3, 4, 4, 2), np.float32) * np.array([1, 2, 3], np.float32).reshape(1, 3, 1, 1, 1)
        gamma = np.ones(3, np.float32)
        beta = np.array([5.0, -1.0, 0.5], np.float32)
        state = layers.BatchNormState.fresh(3)
        y, new_state = layers.batchnorm_forward(x, gamma, beta, state, "train")
        np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 3, 1, 1, 1), x.shape),
                                   atol=1e-4)
        assert new_state.initialized

    def test_train_normalizes(self):
        rng = np.random.default_rng(6)
        x = randn(rng, 2, 3, 6, 6, 4)
        state = layers.BatchNormState.fresh(3, dtype=np.float64)
        y, _ = layers.batchnorm_forward(x, np.ones(3), np.zeros(3), state, "train")
        assert np.all(np.abs(y.mean(axis=(0, 2, 3, 4))) < 1e-5)
        assert np.all(np.abs(y.var(axis=(0, 2, 3, 4)) - 1) < 1e-4)

    def test_infer_requires_initialized_state(self):
        x = np.zeros((1, 2, 4, 4, 2), np.float32)
        state = layers.BatchNormState.fresh(2)
        with pytest.raises(ValueError, match="running statistics"):
            layers.batchnorm_forward(x, np.ones(2, np.float32), np.zeros(2, np.float32),
                                     state, "infer")

    def test_running_statistics_ema(self):
        rng = np.random.default_rng(7)
        x = randn(rng, 1, 2, 4, 4, 3)
        state = layers.BatchNormState.fresh(2, dtype=np.float64)
        _, s1 = layers.batchnorm_forward(x, np.ones(2), np.zeros(2), state, "train",
                                         momentum=0.9)
        np.testing.assert_allclose(s1.running_mean, 0.1 * x.mean(axis=(0, 2, 3, 4)),
                                   rtol=1e-12)
        np.testing.assert_allclose(s1.running_var,
                                   0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3, 4)), rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = randn(rng, 2, 2, 4, 4, 3)
        gamma = randn(rng, 2) + 2.0
        beta = randn(rng, 2)
        w = randn(rng, *x.shape)
        gx, ggamma, gbeta = layers.batchnorm_backward(x, gamma, w)

        def j():
            state = layers.BatchNormState.fresh(2, dtype=np.float64)
            y, _ = layers.batchnorm_forward(x, gamma, beta, state, "train")
            return float(np.sum(w * y))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4
        assert rel_grad_err(ggamma, central_diff_grad(j, gamma)) < 1e-4
        assert rel_grad_err(gbeta, central_diff_grad(j, beta)) < 1e-4


class TestRelu:
    def test_elementwise(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(layers.relu(x), [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = -np.ones((1, 1, 2, 2, 2))
        g = np.ones_like(x)
        assert not layers.relu(x).any()
        assert not layers.relu_backward(x, g).any()

    def test_subgradient_at_zero_is_zero(self):
        x = np.zeros(3)
        g = np.ones(3)
        assert not layers.relu_backward(x, g).any()


class TestMaxPool:
    def test_z_preserved(self):
        x = np.random.default_rng(9).standard_normal((1, 1, 4, 4, 7))
        out, _ = layers.maxpool_2x2x1_forward(x)
        assert out.shape == (1, 1, 2, 2, 7)

    def test_constant_input(self):
        x = np.full((1, 2, 4, 4, 3), 2.5)
        out, rec = layers.maxpool_2x2x1_forward(x)
        assert np.all(out == 2.5)
        gx = layers.maxpool_2x2x1_backward(rec, np.ones_like(out))
        # exactly one recipient per 2x2 window
        windows = gx.reshape(1, 2, 2, 2, 2, 2, 3).sum(axis=(3, 5))
        assert np.all(windows == 1.0)
        assert gx.sum() == out.size

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="pad"):
            layers.maxpool_2x2x1_forward(np.zeros((1, 1, 5, 4, 2)))

    def test_matches_bruteforce_window_scan(self):
        rng = np.random.default_rng(10)
        x = randn(rng, 2, 3, 6, 8, 4)
        out, rec = layers.maxpool_2x2x1_forward(x)
        gy = randn(rng, *out.shape)
        gx = layers.maxpool_2x2x1_backward(rec, gy)
        gx_ref = np.zeros_like(x)
        for n in range(2):
            for c in range(3):
                for i in range(3):
                    for jj in range(4):
                        for z in range(4):
                            win = x[n, c, 2 * i:2 * i + 2, 2 * jj:2 * jj + 2, z]
                            assert out[n, c, i, jj, z] == win.max()
                            a, b = np.unravel_index(np.argmax(win), (2, 2))
                            gx_ref[n, c, 2 * i + a, 2 * jj + b, z] += gy[n, c, i, jj, z]
        np.testing.assert_array_equal(gx, gx_ref)


class TestUpconv:
    def test_shape_doubles_xy(self):
        rng = np.random.default_rng(11)
        x = randn(rng, 1, 4, 8, 8, 5)
        k = randn(rng, 4, 2, 2, 2, 1)
        out = layers.upconv_2x2x1_forward(x, k, np.zeros(2))
        assert out.shape == (1, 2, 16, 16, 5)

    def test_ones_kernel_single_contribution(self):
        x = np.ones((1, 1, 3, 3, 2))
        k = np.ones((1, 1, 2, 2, 1))
        out = layers.upconv_2x2x1_forward(x, k, np.zeros(1))
        assert np.all(out == 1.0)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        x = randn(rng, 1, 3, 4, 4, 3)
        k = randn(rng, 3, 2, 2, 2, 1)
        b = randn(rng, 2)
        w = randn(rng, 1, 2, 8, 8, 3)
        gx, gk, gb = layers.upconv_2x2x1_backward(x, k, w)

        def j():
            return float(np.sum(w * layers.upconv_2x2x1_forward(x, k, b)))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4
        assert rel_grad_err(gk, central_diff_grad(j, k)) < 1e-4
        assert rel_grad_err(gb, central_diff_grad(j, b)) < 1e-4

    def test_is_adjoint_of_strided_conv(self):
        # <upconv(x), y> == <x, strided_conv(y)> for the same kernel
        rng = np.random.default_rng(13)
        x = randn(rng, 1, 2, 3, 3, 2)
        k = randn(rng, 2, 3, 2, 2, 1)
        y = randn(rng, 1, 3, 6, 6, 2)
        up = layers.upconv_2x2x1_forward(x, k, np.zeros(3))
        down = np.zeros_like(x)
        for dx in range(2):
            for dy in range(2):
                down += np.einsum("co,noxyz->ncxyz", k[:, :, dx, dy, 0],
                                  y[:, :, dx::2, dy::2, :])
        assert abs(np.sum(up * y) - np.sum(x * down)) < 1e-10


class TestConcat:
    def test_channel_counts_add(self):
        a = np.zeros((1, 2, 3, 3, 2))
        b = np.ones((1, 3, 3, 3, 2))
        out = layers.concat_channels(a, b)
        assert out.shape == (1, 5, 3, 3, 2)
        assert np.all(out[:, :2] == 0) and np.all(out[:, 2:] == 1)

    def test_empty_channel_identity(self):
        a = np.random.default_rng(14).standard_normal((1, 3, 2, 2, 2))
        empty = np.zeros((1, 0, 2, 2, 2))
        np.testing.assert_array_equal(layers.concat_channels(a, empty), a)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError, match="concatenate"):
            layers.concat_channels(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 2, 2)))

    def test_backward_splits(self):
        rng = np.random.default_rng(15)
        g = randn(rng, 1, 5, 2, 2, 2)
        ga, gb = layers.concat_channels_backward(g, 2)
        np.testing.assert_array_equal(ga, g[:, :2])
        np.testing.assert_array_equal(gb, g[:, 2:])


class TestDropout:
    def test_infer_is_bit_exact_identity(self):
        x = np.random.default_rng(16).standard_normal((1, 2, 4, 4, 3)).astype(np.float32)
        y, mask = layers.dropout(x, 0.2, seed=0, mode="infer")
        assert mask is None
        assert np.array_equal(y, x)

    def test_rate_zero_identity(self):
        x = np.random.default_rng(17).standard_normal((1, 1, 2, 2, 2))
        for mode in ("train", "infer"):
            y, _ = layers.dropout(x, 0.0, seed=3, mode=mode)
            np.testing.assert_array_equal(y, x)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError, match="rate"):
            layers.dropout(np.zeros(3), 1.0, seed=0, mode="train")

    def test_empirical_drop_fraction(self):
        x = np.ones(10 ** 6, np.float32)
        y, _ = layers.dropout(x, 0.2, seed=42, mode="train")
        dropped = np.mean(y == 0)
        assert abs(dropped - 0.2) < 0.005
        survivors = y[y != 0]
        np.testing.assert_allclose(survivors, 1.25, rtol=1e-6)

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(18).standard_normal((2, 3, 4, 4, 2))
        y1, _ = layers.dropout(x, 0.2, seed=7, mode="train")
        y2, _ = layers.dropout(x, 0.2, seed=7, mode="train")
        np.testing.assert_array_equal(y1, y2)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(19)
        x = randn(rng, 1, 2, 4, 4, 2)
        w = randn(rng, *x.shape)
        _, mask = layers.dropout(x, 0.3, seed=5, mode="train")
        gx = layers.dropout_backward(mask, 0.3, w)

        def j():
            y, _ = layers.dropout(x, 0.3, seed=5, mode="train")
            return float(np.sum(w * y))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4


class TestSoftmax:
    def test_equal_logits(self):
        x = np.zeros((1, 2, 2, 2, 2))
        y = layers.softmax_channels(x)
        np.testing.assert_allclose(y, 0.5)

    def test_extreme_logits_stable(self):
        x = np.zeros((1, 2, 1, 1, 1))
        x[0, 1] = 1000.0
        y = layers.softmax_channels(x)
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y[0, 1], 1.0, atol=1e-12)
        np.testing.assert_allclose(y[0, 0], 0.0, atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(20)
        x = randn(rng, 2, 4, 3, 3, 2)
        y = layers.softmax_channels(x)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(y > 0) and np.all(y < 1)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        x = randn(rng, 1, 3, 3, 3, 2)
        w = randn(rng, *x.shape)
        y = layers.softmax_channels(x)
        gx = layers.softmax_channels_backward(y, w)

        def j():
            return float(np.sum(w * layers.softmax_channels(x)))

        assert rel_grad_err(gx, central_diff_grad(j, x)) < 1e-4


@pytest.mark.parametrize("z", [1, 2, 5, 11])
def test_all_primitives_preserve_z(z):
    rng = np.random.default_rng(z)
    x = rng.standard_normal((1, 2, 4, 4, z))
    k3 = rng.standard_normal((3, 2, 3, 3, 3))
    assert layers.conv3d_forward(x, k3, np.zeros(3)).shape[-1] == z
    assert layers.maxpool_2x2x1_forward(x)[0].shape[-1] == z
    ku = rng.standard_normal((2, 2, 2, 2, 1))
    assert layers.upconv_2x2x1_forward(x, ku, np.zeros(2)).shape[-1] == z
    state = layers.BatchNormState.fresh(2, dtype=np.float64)
    assert layers.batchnorm_forward(x, np.ones(2), np.zeros(2), state, "train")[0].shape[-1] == z
    assert layers.softmax_channels(x).shape[-1] == z
    assert layers.relu(x).shape[-1] == z
    assert layers.dropout(x, 0.2, 0, "train")[0].shape[-1] == z
    assert layers.concat_channels(x, x).shape[-1] == z


def test_outputs_finite():
    rng = np.random.default_rng(99)
    x = rng.standard_normal((1, 2, 4, 4, 3)).astype(np.float32) * 100
    k = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    out = layers.conv3d_forward(x, k, np.zeros(2, np.float32))
    assert np.all(np.isfinite(out))
    assert np.all(np.isfinite(layers.softmax_channels(out)))
