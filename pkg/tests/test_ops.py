"""nn-core: forward/backward correctness against brute-force and finite
differences, numeric stability, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from checks import check_param_grads, numeric_grad, rel_err
from fedfusion import ops
from fedfusion.errors import ConfigError, NumericsError, ShapeError
from fedfusion.layers import Parameter
from fedfusion.train import TrainConfig, sgd_step, train_model


def conv2d_loops(x, kernel, bias, stride=1, pad=0):
    """Direct six-nested-loop summation oracle for cross-correlation."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += x[i * stride + di, j * stride + dj, ci] * kernel[di, dj, ci, co]
                out[i, j, co] = acc + bias[co]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(3, 3, 1)
        k = np.ones((1, 1, 1, 1))
        out = ops.conv2d_forward(x, k, np.zeros(1), 1, "valid")
        np.testing.assert_array_equal(out, x)

    def test_constant_sum(self):
        x = np.ones((4, 4, 1))
        k = np.ones((3, 3, 1, 1))
        out = ops.conv2d_forward(x, k, np.zeros(1), 1, "valid")
        np.testing.assert_array_equal(out, np.full((2, 2, 1), 9.0))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        got = ops.conv2d_forward(x, k, b, 1, "valid")
        want = conv2d_loops(x, k, b)
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "valid"), (2, "same")])
    def test_matches_loop_oracle_strided(self, stride, padding):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((6, 6, 2))
        k = rng.standard_normal((3, 3, 2, 2))
        b = rng.standard_normal(2)
        got = ops.conv2d_forward(x, k, b, stride, padding)
        want = conv2d_loops(x, k, b, stride, pad=1 if padding == "same" else 0)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_channel_mismatch_names_shapes(self):
        x = np.zeros((4, 4, 2))
        k = np.zeros((3, 3, 3, 1))
        with pytest.raises(ShapeError) as exc:
            ops.conv2d_forward(x, k, np.zeros(1))
        assert "(4, 4, 2)" in str(exc.value) and "(3, 3, 3, 1)" in str(exc.value)

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 2))
        out, cache = ops.conv2d_forward(x, k, np.zeros(2), 1, "valid", with_cache=True)
        dx, dk, db = ops.conv2d_backward(np.zeros_like(out), k, cache)
        assert not dx.any() and not dk.any() and not db.any()

    def test_backward_missing_cache(self):
        with pytest.raises(ShapeError):
            ops.conv2d_backward(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)), None)

    def test_gradcheck_1x1(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 3, 1))
        k = rng.standard_normal((1, 1, 1, 1))
        b = rng.standard_normal(1)
        t = rng.standard_normal((3, 3, 1))

        def loss():
            return float((ops.conv2d_forward(x, k, b, 1, "valid") * t).sum())

        out, cache = ops.conv2d_forward(x, k, b, 1, "valid", with_cache=True)
        dx, dk, db = ops.conv2d_backward(t, k, cache)
        for arr, ana in ((x, dx), (k, dk), (b, db)):
            num, idx = numeric_grad(loss, arr)
            assert rel_err(num, ana.ravel()[idx]).max() < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck_random(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 2))
        b = rng.standard_normal(2)
        t = rng.standard_normal((3, 3, 2))

        def loss():
            return float((ops.conv2d_forward(x, k, b, 1, "valid") * t).sum())

        out, cache = ops.conv2d_forward(x, k, b, 1, "valid", with_cache=True)
        dx, dk, db = ops.conv2d_backward(t, k, cache)
        for arr, ana in ((x, dx), (k, dk), (b, db)):
            num, idx = numeric_grad(loss, arr)
            assert rel_err(num, ana.ravel()[idx]).max() < 1e-4


class TestDense:
    def test_identity(self):
        x = np.arange(4.0)
        assert np.array_equal(ops.dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_zero_weights_bias(self):
        b = np.array([1.0, -2.0])
        out = ops.dense_forward(np.ones(3), np.zeros((3, 2)), b)
        np.testing.assert_array_equal(out, b)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ops.dense_forward(np.zeros(3), np.zeros((4, 2)), np.zeros(2))

    def test_gradcheck_8_to_4(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(8)
        w = rng.standard_normal((8, 4))
        b = rng.standard_normal(4)
        t = rng.standard_normal(4)

        def loss():
            return float((ops.dense_forward(x, w, b) * t).sum())

        dx, dw, db = ops.dense_backward(t, x, w)
        for arr, ana in ((x, dx), (w, dw), (b, db)):
            num, idx = numeric_grad(loss, arr)
            assert rel_err(num, ana.ravel()[idx]).max() < 1e-6


class TestBatchNorm:
    def test_standardized_batch_unchanged(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 4))
        x = (x - x.mean(0)) / x.std(0)
        out, _, _, _ = ops.batch_norm_forward(x, np.ones(4), np.zeros(4), "train")
        np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max() + 1e-6, rtol=1e-4)

    def test_constant_batch_gives_beta(self):
        x = np.full((5, 3), 7.0)
        beta = np.array([1.0, 2.0, 3.0])
        out, _, _, _ = ops.batch_norm_forward(x, np.ones(3), beta, "train")
        np.testing.assert_allclose(out, np.broadcast_to(beta, (5, 3)), atol=1e-12)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ShapeError):
            ops.batch_norm_forward(np.zeros((1, 3)), np.ones(3), np.zeros(3), "train")

    def test_train_mode_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(5.0, 3.0, (64, 6))
        out, _, _, _ = ops.batch_norm_forward(x, np.ones(6), np.zeros(6), "train")
        np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(0), 1.0, atol=1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((6, 4))
        gamma = rng.standard_normal(4) + 1.5
        beta = rng.standard_normal(4)
        t = rng.standard_normal((6, 4))

        def loss():
            out, _, _, _ = ops.batch_norm_forward(x, gamma, beta, "train")
            return float((out * t).sum())

        _, cache, _, _ = ops.batch_norm_forward(x, gamma, beta, "train")
        dx, dg, db = ops.batch_norm_backward(t, cache)
        for arr, ana in ((x, dx), (gamma, dg), (beta, db)):
            num, idx = numeric_grad(loss, arr)
            assert rel_err(num, ana.ravel()[idx]).max() < 1e-4


class TestActivationsPooling:
    def test_dropout_infer_identity(self):
        x = np.arange(10.0)
        out, _ = ops.dropout(x, 0.5, "infer")
        np.testing.assert_array_equal(out, x)

    def test_dropout_train_scaling(self):
        rng = np.random.default_rng(5)
        x = np.ones((100, 100))
        out, _ = ops.dropout(x, 0.5, "train", rng)
        assert set(np.unique(out)) == {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ShapeError):
            ops.dropout(np.ones(3), 1.0, "train", np.random.default_rng(0))

    def test_global_avg_pool_constant(self):
        x = np.stack([np.full((4, 4), 2.5), np.full((4, 4), -1.0)], axis=-1)
        np.testing.assert_array_equal(ops.global_avg_pool(x), [2.5, -1.0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_relu_sign_exclusivity(self, values):
        x = np.array(values)
        assert not (ops.relu(x) * ops.relu(-x)).any()

    def test_max_pool_backward_gradcheck(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 4, 4, 2))
        t = rng.standard_normal((2, 2, 2, 2))

        def loss():
            out, _ = ops.max_pool2d(x)
            return float((out * t).sum())

        _, cache = ops.max_pool2d(x)
        dx = ops.max_pool2d_backward(t, cache)
        num, idx = numeric_grad(loss, x, indices=rng.choice(x.size, 20, replace=False))
        assert rel_err(num, dx.ravel()[idx]).max() < 1e-4


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        np.testing.assert_allclose(ops.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)

    def test_large_logit_stable(self):
        out = ops.softmax(np.array([1000.0, 0.0, 0.0]))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)

    def test_nan_rejected(self):
        with pytest.raises(NumericsError):
            ops.softmax(np.array([np.nan, 0.0]))

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=10),
           st.floats(-50, 50))
    @settings(max_examples=50)
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        z = np.array(logits)
        p = ops.softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(ops.softmax(z + shift), p, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_is_probs_minus_onehot(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((3, 4))
        y = rng.integers(0, 4, 3)
        _, grad = ops.softmax_cross_entropy(z, y)
        onehot = np.eye(4)[y]
        np.testing.assert_allclose(grad, (ops.softmax(z) - onehot) / 3, atol=1e-12)

        def loss():
            return ops.softmax_cross_entropy(z, y)[0]

        num, idx = numeric_grad(loss, z)
        assert rel_err(num, grad.ravel()[idx]).max() < 1e-4


class TestSgd:
    def test_zero_lr_is_noop(self):
        p = Parameter("w", np.array([1.0, 2.0]))
        p.grad = np.array([5.0, -3.0])
        sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.value, [1.0, 2.0])

    def test_direct_rule(self):
        p = Parameter("w", np.array([1.0]))
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        np.testing.assert_allclose(p.value, [0.8])
        assert not p.grad.any()

    def test_quadratic_loss_decreases(self):
        p = Parameter("w", np.array([3.0]))

        def loss():
            return float((p.value**2).sum())

        before = loss()
        p.grad = 2.0 * p.value
        sgd_step([p], 0.1)
        assert loss() < before

    def test_nonfinite_grad_names_parameter(self):
        p = Parameter("conv9/kernel", np.array([1.0]))
        p.grad = np.array([np.inf])
        with pytest.raises(NumericsError, match="conv9/kernel"):
            sgd_step([p], 0.1)

    def test_frozen_parameter_unchanged(self):
        p = Parameter("frozen", np.array([1.0]), trainable=False)
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        np.testing.assert_array_equal(p.value, [1.0])


class TestDeterminismAndFiniteness:
    def test_training_bitwise_deterministic(self):
        from fedfusion.data import generate_synthetic
        from fedfusion.models import build_model

        ds = generate_synthetic(6, 16, 0.1, 0)
        vals = []
        for _ in range(2):
            m = build_model("vgg", input_shape=(16, 16, 1), seed=5)
            train_model(m, ds.images, ds.labels, TrainConfig(epochs=2, batch_size=6, rng_seed=9))
            vals.append(np.concatenate([p.value.ravel() for p in m.params()]))
        assert vals[0].tobytes() == vals[1].tobytes()

    def test_forward_finite_on_finite_inputs(self):
        from fedfusion.models import build_model

        rng = np.random.default_rng(11)
        for name in ("vgg", "inception", "dense", "swin"):
            m = build_model(name, seed=1)
            out = m.forward(rng.random((2, 32, 32, 1)) * 100.0, train=True, rng=rng)
            assert np.isfinite(out).all()

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(dropout_rate=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradchecks_many_seeds(seed):
    """Every parameterized layer type vs finite differences, one seed each run."""
    rng = np.random.default_rng(seed)
    from fedfusion.layers import BatchNorm, Conv2D, Dense, LayerNorm

    x_img = rng.standard_normal((2, 6, 6, 2))
    x_vec = rng.standard_normal((3, 5))
    cases = [
        (Conv2D("c", rng, 3, 2, 2), x_img),
        (Dense("d", rng, 5, 4), x_vec),
        (BatchNorm("b", 5), x_vec),
        (LayerNorm("l", 5), x_vec),
    ]
    for layer, x in cases:
        t = rng.standard_normal(layer.forward(x, train=True).shape)

        def loss():
            return float((layer.forward(x, train=True) * t).sum())

        layer.forward(x, train=True)
        layer.backward(t)
        assert check_param_grads(loss, layer.params(), rng, n_entries=4) < 1e-4
