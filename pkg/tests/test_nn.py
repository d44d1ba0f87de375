import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probevol.errors import NumericError, StructuralError
from probevol.nn import (
    Activation, AdamState, LayerSpec, NetworkParams, TrainConfig, adam_step, backward,
    backward_from_output, elu, elu_derivative, forward, init_params, loss_value, paper_layer_spec,
    predict, sample_dropout_masks, sigmoid, train,
)


def finite_difference_max_rel_error(params, spec, X, y, loss="mse", h=1e-5, floor=1e-6):
    """Central differences over every trainable entry vs. backward()."""
    est, cache = forward(params, spec, X, "train")
    grads = backward(params, spec, cache, y, loss)
    worst = 0.0
    for arr, g in zip(params.trainable(), grads.trainable()):
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            lp = loss_value(forward(params, spec, X, "train")[0], y, loss)
            arr[i] = orig - h
            lm = loss_value(forward(params, spec, X, "train")[0], y, loss)
            arr[i] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor))
    return worst


def random_net(rng, max_dims=(10, 8, 8), batchnorm=False, keep_prob=1.0):
    dims = [int(rng.integers(1, d + 1)) for d in max_dims]
    spec = LayerSpec(dims[0], tuple(dims[1:]), 1, Activation("elu", 1.0), batchnorm, keep_prob)
    params = init_params(spec, rng)
    for a in params.trainable():
        a += rng.normal(0, 0.1, a.shape)
    return spec, params


class TestActivations:
    def test_elu_values(self):
        assert elu(0.0, 1.0) == 0.0
        assert elu(2.5, 1.0) == 2.5
        assert elu(-1.0, 1.0) == pytest.approx(math.exp(-1) - 1, abs=1e-12)
        assert elu(-1.0, 1.0) == pytest.approx(-0.632121, abs=1e-6)

    def test_elu_derivative_values(self):
        assert elu_derivative(3.0, 1.0) == 1.0
        assert elu_derivative(0.0, 1.0) == 1.0
        assert elu_derivative(-1.0, 1.0) == pytest.approx(math.exp(-1), abs=1e-12)

    @given(st.floats(-20, 20), st.floats(0.1, 3.0))
    def test_elu_derivative_is_elu_plus_alpha_on_negative_side(self, x, alpha):
        if x <= 0:
            assert elu_derivative(x, alpha) == pytest.approx(elu(x, alpha) + alpha, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
    def test_elu_continuity_and_one_sided_slopes(self, alpha):
        for eps in (1e-3, 1e-6, 1e-9):
            assert abs(elu(eps, alpha) - elu(-eps, alpha)) < 3 * eps * max(1, alpha)
        assert elu_derivative(1e-12, alpha) == 1.0
        assert elu_derivative(-1e-12, alpha) == pytest.approx(alpha)

    def test_sigmoid_values(self):
        assert sigmoid(0.0, 1.0) == 0.5
        assert abs(sigmoid(1000.0, 1.0) - 1.0) < 1e-12
        assert sigmoid(-1000.0, 1.0) < 1e-12
        assert sigmoid(1.0, 1.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
        assert sigmoid(1.0, 1.0) == pytest.approx(0.731059, abs=1e-6)

    def test_sigmoid_large_inputs_do_not_warn(self):
        with np.errstate(all="raise"):
            sigmoid(np.array([-1e6, 1e6]), 2.0)

    def test_bad_activation_parameter(self):
        with pytest.raises(ValueError):
            Activation("elu", 0.0)
        with pytest.raises(ValueError):
            Activation("relu")


class TestDropoutMasks:
    def test_keep_all(self):
        spec = LayerSpec(4, (5, 6), keep_prob=1.0)
        masks = sample_dropout_masks(spec, np.random.default_rng(0), 3)
        assert [m.shape for m in masks] == [(3, 5), (3, 6)]
        assert all(np.all(m == 1) for m in masks)

    def test_fraction_of_ones(self):
        spec = LayerSpec(4, (10_000,), keep_prob=0.5)
        mask = sample_dropout_masks(spec, np.random.default_rng(7), 1)[0]
        assert 0.48 <= mask.mean() <= 0.52
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_same_seed_same_masks(self):
        spec = LayerSpec(4, (30, 20), keep_prob=0.7)
        a = sample_dropout_masks(spec, np.random.default_rng(3), 8)
        b = sample_dropout_masks(spec, np.random.default_rng(3), 8)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestForward:
    def test_zero_network_outputs_zero(self):
        spec = LayerSpec(5, (4, 3), keep_prob=1.0)
        params = init_params(spec, np.random.default_rng(0)).zeros_like()
        params.output_scale = 1.0
        x = np.random.default_rng(1).normal(size=(7, 5))
        est, _ = forward(params, spec, x)
        assert np.all(est == 0)

    def test_single_linear_layer(self):
        spec = LayerSpec(2, (), 1, Activation("elu"), keep_prob=1.0)
        params = NetworkParams([np.array([[1.0, 1.0]])], [np.array([0.0])])
        est, _ = forward(params, spec, np.array([2.0, 3.0]))
        assert est == 5.0

    def test_keep_prob_one_train_equals_eval(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            spec, params = random_net(rng, (12, 9, 7), keep_prob=1.0)
            x = rng.normal(size=(5, spec.input_dim))
            masks = sample_dropout_masks(spec, rng, 5)
            train_out, _ = forward(params, spec, x, "train", masks)
            eval_out, _ = forward(params, spec, x, "eval")
            assert np.array_equal(train_out, eval_out)

    def test_inverted_dropout_expectation(self):
        # mean train-mode pre-activation of a downstream neuron tracks eval mode
        rng = np.random.default_rng(5)
        spec = LayerSpec(6, (40, 1), keep_prob=0.5)
        params = init_params(spec, rng)
        params.weights[1] = np.abs(params.weights[1])
        x = np.abs(rng.normal(size=(1, 6))) + 0.5
        n = 200_000
        X = np.repeat(x, n, axis=0)
        masks = sample_dropout_masks(spec, rng, n)
        _, tcache = forward(params, spec, X, "train", masks)
        _, ecache = forward(params, spec, x, "eval")
        train_pre = tcache.pre[1][:, 0].mean()
        eval_pre = ecache.pre[1][0, 0]
        # each sample is sum_j w_j h_j m_j / p with m_j ~ Bernoulli(p)
        contrib = params.weights[1][0] * ecache.act[0][0]
        sd = np.sqrt(np.sum(contrib ** 2) * (1 - 0.5) / 0.5)
        assert abs(train_pre - eval_pre) <= 4 * sd / np.sqrt(n)
        assert abs(train_pre - eval_pre) <= 0.02 * abs(eval_pre)

    def test_dimension_mismatch(self):
        spec = LayerSpec(3, (4,), keep_prob=1.0)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(StructuralError):
            forward(params, spec, np.ones(4))

    def test_masks_only_in_train_mode(self):
        spec = LayerSpec(3, (4,), keep_prob=0.5)
        params = init_params(spec, np.random.default_rng(0))
        masks = sample_dropout_masks(spec, np.random.default_rng(0), 1)
        with pytest.raises(StructuralError):
            forward(params, spec, np.ones(3), "eval", masks)
        with pytest.raises(StructuralError):
            forward(params, spec, np.ones(3), "train")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_layer(self):
        spec = LayerSpec(2, (3, 3), keep_prob=1.0)
        params = init_params(spec, np.random.default_rng(0))
        params.weights[1][:] = np.inf
        with pytest.raises(NumericError) as info:
            forward(params, spec, np.ones(2))
        assert info.value.layer == 1


class TestBackward:
    def test_gradient_check_plain(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            spec, params = random_net(rng)
            X = rng.normal(size=(6, spec.input_dim))
            y = rng.normal(size=6)
            assert finite_difference_max_rel_error(params, spec, X, y) < 1e-4

    def test_gradient_check_mae_away_from_kink(self):
        rng = np.random.default_rng(1)
        spec, params = random_net(rng, (6, 5, 4))
        X = rng.normal(size=(4, spec.input_dim))
        est, _ = forward(params, spec, X)
        y = est + np.where(rng.random(4) < 0.5, -1.0, 1.0)   # residuals far from 0
        assert finite_difference_max_rel_error(params, spec, X, y, loss="mae") < 1e-4

    def test_gradient_check_batchnorm(self):
        # batchnorm makes upstream weight gradients tiny; floor at 1e-3 of the
        # largest gradient entry
        rng = np.random.default_rng(2)
        for _ in range(5):
            spec, params = random_net(rng, (7, 6, 5), batchnorm=True)
            X = rng.normal(size=(8, spec.input_dim))
            y = rng.normal(size=8)
            _, cache = forward(params, spec, X, "train")
            g = backward(params, spec, cache, y, "mse")
            floor = 1e-3 * max(np.abs(a).max() for a in g.trainable())
            assert finite_difference_max_rel_error(params, spec, X, y, floor=floor) < 1e-4

    def test_gradient_check_with_fixed_dropout_masks(self):
        rng = np.random.default_rng(3)
        spec, params = random_net(rng, (5, 6, 6), keep_prob=0.6)
        X = rng.normal(size=(5, spec.input_dim))
        y = rng.normal(size=5)
        masks = sample_dropout_masks(spec, rng, 5)
        est, cache = forward(params, spec, X, "train", masks)
        grads = backward(params, spec, cache, y, "mse")
        h = 1e-5
        for arr, g in zip(params.trainable(), grads.trainable()):
            for i in np.ndindex(arr.shape):
                orig = arr[i]
                arr[i] = orig + h
                lp = loss_value(forward(params, spec, X, "train", masks)[0], y, "mse")
                arr[i] = orig - h
                lm = loss_value(forward(params, spec, X, "train", masks)[0], y, "mse")
                arr[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-6)
        # dropped units receive no gradient on their incoming weights
        dropped = np.all(masks[0] == 0, axis=0)
        assert np.all(grads.weights[0][dropped] == 0)

    def test_zero_residual_gives_zero_gradient(self):
        rng = np.random.default_rng(4)
        spec, params = random_net(rng, keep_prob=1.0)
        X = rng.normal(size=(3, spec.input_dim))
        est, cache = forward(params, spec, X, "train")
        grads = backward(params, spec, cache, est, "mse")
        assert all(np.all(g == 0) for g in grads.trainable())

    def test_gradient_linear_in_loss_scale(self):
        rng = np.random.default_rng(5)
        spec, params = random_net(rng, keep_prob=1.0)
        X = rng.normal(size=(3, spec.input_dim))
        _, cache = forward(params, spec, X, "train")
        d = rng.normal(size=3)
        g1 = backward_from_output(params, spec, cache, d)
        g3 = backward_from_output(params, spec, cache, 3.0 * d)
        for a, b in zip(g1.trainable(), g3.trainable()):
            np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12, atol=1e-15)

    def test_missing_cache(self):
        spec = LayerSpec(2, (2,), keep_prob=1.0)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(StructuralError):
            backward(params, spec, None, np.zeros(1))


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState.zeros(p)
        state, p = adam_step(state, p, [np.zeros(2)])
        assert np.array_equal(p[0], [1.0, -2.0])
        assert state.t == 1

    def test_quadratic_convergence(self):
        w = [np.array([0.0])]
        state = AdamState.zeros(w, learning_rate=0.1)
        for _ in range(500):
            adam_step(state, w, [2 * (w[0] - 3.0)])
        assert abs(w[0][0] - 3.0) < 0.05

    @given(st.floats(1e-6, 1e3) | st.floats(-1e3, -1e-6), st.floats(1e-4, 0.5))
    def test_first_step_moves_by_lr_against_gradient(self, g, lr):
        p = [np.array([0.0])]
        state = AdamState.zeros(p, learning_rate=lr)
        adam_step(state, p, [np.array([g])])
        assert np.sign(p[0][0]) == -np.sign(g)
        # bias-corrected moments are g and g^2, so the step is lr * |g| / (|g| + eps)
        assert abs(p[0][0]) == pytest.approx(lr * abs(g) / (abs(g) + 1e-8), rel=1e-9)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0))
    def test_step_bounded_by_lr_for_constant_magnitude_gradients(self, seed, mag):
        rng = np.random.default_rng(seed)
        p = [np.zeros(16)]
        state = AdamState.zeros(p, learning_rate=0.01)
        for _ in range(40):
            before = p[0].copy()
            adam_step(state, p, [mag * rng.choice([-1.0, 1.0], size=16)])
            assert np.max(np.abs(p[0] - before)) <= 0.01 * (1 + 1e-9)

    def test_non_finite_gradient_aborts_step(self):
        p = [np.array([1.0, 2.0])]
        state = AdamState.zeros(p)
        with pytest.raises(NumericError):
            adam_step(state, p, [np.array([1.0, np.nan])])
        assert state.t == 0
        assert np.array_equal(p[0], [1.0, 2.0])
        assert np.all(state.m[0] == 0)


class TestTrain:
    def test_zero_epochs_returns_initialization(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(20, 3)), rng.normal(size=20)
        spec = LayerSpec(3, (4,), keep_prob=1.0)
        params, hist = train(X, y, spec, TrainConfig(epochs=0, seed=9, scale_targets=False))
        ref = init_params(spec, np.random.default_rng(9))
        assert len(hist) == 0 and hist.val_mae == []
        assert all(np.array_equal(a, b) for a, b in zip(params.trainable(), ref.trainable()))

    def test_memorizes_small_dataset(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 4))
        y = 500 + 200 * rng.normal(size=50)
        spec = LayerSpec(4, (32, 32), keep_prob=1.0)
        _, hist = train(X, y, spec, TrainConfig(epochs=2000, batch_size=64, learning_rate=3e-3, seed=0))
        assert hist.train_mae[-1] < 0.05 * y.std()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(120, 5)), rng.normal(size=120) * 10
        spec = LayerSpec(5, (16, 16), use_batchnorm=True, keep_prob=0.5)
        cfg = TrainConfig(epochs=5, batch_size=32, seed=4)
        val = (X[:20], y[:20])
        p1, h1 = train(X, y, spec, cfg, val)
        p2, h2 = train(X, y, spec, cfg, val)
        assert h1.train_mae == h2.train_mae and h1.val_mae == h2.val_mae
        arrays = lambda p: p.trainable() + p.running_mean + p.running_var
        assert all(np.array_equal(a, b) for a, b in zip(arrays(p1), arrays(p2)))

    def test_history_lengths(self):
        rng = np.random.default_rng(3)
        X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
        _, h = train(X, y, LayerSpec(2, (4,)), TrainConfig(epochs=7, batch_size=8))
        assert len(h.train_mae) == len(h.val_mae) == 7
        assert all(math.isnan(v) for v in h.val_mae)

    def test_rejects_empty_and_nan(self):
        spec = LayerSpec(2, (3,))
        with pytest.raises(StructuralError):
            train(np.zeros((0, 2)), np.zeros(0), spec, TrainConfig(epochs=1))
        X = np.ones((4, 2))
        X[1, 1] = np.nan
        with pytest.raises(NumericError):
            train(X, np.zeros(4), spec, TrainConfig(epochs=1))


class TestPredict:
    def _linear(self, bias):
        spec = LayerSpec(1, (), 1, Activation("elu"), keep_prob=1.0)
        return NetworkParams([np.array([[0.0]])], [np.array([bias])]), spec

    def test_negative_output_clamped(self):
        params, spec = self._linear(-12.3)
        assert predict(params, spec, np.array([1.0])) == 0.0

    def test_positive_output_passes_through(self):
        params, spec = self._linear(847.2)
        assert predict(params, spec, np.array([1.0])) == 847.2

    def test_pure(self):
        rng = np.random.default_rng(0)
        spec = paper_layer_spec(input_dim=6)
        params = init_params(spec, rng)
        X = rng.normal(size=(10, 6))
        a = predict(params, spec, X)
        b = predict(params, spec, X)
        assert np.array_equal(a, b)
        assert np.all(a >= 0)
