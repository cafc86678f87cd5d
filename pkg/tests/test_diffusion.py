"""Schedule, forward/reverse kernels, objective, and the training loop."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specklediff import diffusion as df
from specklediff.autodiff import Tensor
from specklediff.optim import AdamState
from specklediff.speckle import SpeckleParams, make_dataset, synthetic_textures
from specklediff.validation import ShapeError

from helpers import tiny_predictor_config
from specklediff.predictor import init_params


class TestSchedule:
    def test_hand_cumulative_product(self):
        s = df.make_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(s.beta, [0.1, 0.2])
        np.testing.assert_allclose(s.alpha, [0.9, 0.8])
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])
        np.testing.assert_allclose(s.sigma**2, s.beta)

    def test_first_alpha_bar_single_factor(self):
        s = df.make_schedule(5, 0.05, 0.3)
        assert s.alpha_bar[0] == 1.0 - s.beta[0]

    def test_default_endpoints_scale_with_T(self):
        s = df.make_schedule(100)
        np.testing.assert_allclose(s.beta[0], 1e-4 * 10)
        np.testing.assert_allclose(s.beta[-1], 0.02 * 10)

    @settings(max_examples=40, deadline=None)
    @given(
        T=st.integers(1, 200),
        start=st.floats(1e-6, 0.4),
        width=st.floats(0.0, 0.5),
    )
    def test_alpha_bar_strictly_decreasing(self, T, start, width):
        s = df.make_schedule(T, start, min(start + width, 0.95))
        assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar < 1)
        assert np.all(np.diff(s.alpha_bar) < 0) or T == 1

    def test_invalid_ranges_rejected(self):
        for bad in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)]:
            with pytest.raises(ValueError):
                df.make_schedule(10, *bad)
        with pytest.raises(ValueError):
            df.make_schedule(0)


class TestQSample:
    def test_hand_value_no_noise(self):
        s = df.make_schedule(2, 0.1, 0.2)
        x0 = np.ones((4, 4), np.float32)
        out = df.q_sample(x0, 2, np.zeros_like(x0), s)
        np.testing.assert_allclose(out, np.sqrt(0.72), rtol=1e-6)

    def test_no_noise_limit(self):
        s = df.make_schedule(1, 1e-8, 1e-8)
        x0 = np.random.default_rng(0).uniform(-1, 1, (8, 8))
        out = df.q_sample(x0, 1, np.zeros_like(x0), s)
        np.testing.assert_allclose(out, x0, atol=1e-7)

    def test_marginal_moments_monte_carlo(self):
        # Mild schedule keeps the mean large against Monte-Carlo error, so
        # the 1% relative tolerance has >5 sigma of headroom at 1e6 draws.
        s = df.make_schedule(10, 0.01, 0.05)
        rng = np.random.default_rng(1)
        t = 7
        draws = rng.standard_normal(1_000_000)
        xt = df.q_sample(np.ones_like(draws), t, draws, s)
        abar = s.alpha_bar[t - 1]
        assert abs(xt.mean() / np.sqrt(abar) - 1) < 0.01
        assert abs(xt.var() / (1 - abar) - 1) < 0.01

    def test_affine_in_x0_and_eps(self):
        s = df.make_schedule(5)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 6))
        e = rng.standard_normal((6, 6))
        zero = np.zeros_like(x)
        # superposition of the signal and noise arguments
        lhs = df.q_sample(2.0 * x, 4, -0.5 * e, s)
        rhs = 2.0 * df.q_sample(x, 4, zero, s) - 0.5 * df.q_sample(zero, 4, e, s)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_per_sample_t_vector(self):
        s = df.make_schedule(10)
        x0 = np.ones((3, 1, 2, 2))
        eps = np.zeros_like(x0)
        out = df.q_sample(x0, np.array([1, 5, 10]), eps, s)
        for i, t in enumerate((1, 5, 10)):
            np.testing.assert_allclose(out[i], np.sqrt(s.alpha_bar[t - 1]), rtol=1e-12)

    def test_t_out_of_range(self):
        s = df.make_schedule(4)
        with pytest.raises(ValueError):
            df.q_sample(np.zeros((2, 2)), 5, np.zeros((2, 2)), s)

    def test_iterated_one_step_kernel_matches_closed_form(self):
        # Composing t one-step transitions reproduces the closed-form marginal
        # moments (unit-level scale; the acceptance suite runs the full size).
        T = 50
        s = df.make_schedule(T)
        rng = np.random.default_rng(3)
        n = 20_000
        x0 = rng.uniform(-0.2, 0.8, (8, 8))
        x = np.broadcast_to(x0, (n, 8, 8)).copy()
        for t in range(1, T + 1):
            eps = rng.standard_normal((n, 8, 8))
            x = np.sqrt(1 - s.beta[t - 1]) * x + np.sqrt(s.beta[t - 1]) * eps
            if t == T // 2 or t == T:
                resid = x - np.sqrt(s.alpha_bar[t - 1]) * x0
                std = np.sqrt(1 - s.alpha_bar[t - 1])
                assert abs(resid.mean()) < 0.02 * std
                assert abs(resid.var() / (1 - s.alpha_bar[t - 1]) - 1) < 0.02


class TestReverseStep:
    def test_exact_recovery_identity_at_t1(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            T = int(rng.integers(1, 50))
            b0 = float(rng.uniform(1e-4, 0.4))
            b1 = float(rng.uniform(b0, 0.5))
            s = df.make_schedule(T, b0, b1)
            x0 = rng.uniform(-1, 1, (12, 12)).astype(np.float32)
            eps = rng.standard_normal((12, 12)).astype(np.float32)
            x1 = df.q_sample(x0, 1, eps, s)
            back = df.reverse_step(x1, 1, eps, None, s)
            assert np.max(np.abs(back - x0)) <= 1e-5

    def test_zero_prediction_is_pure_rescale(self):
        s = df.make_schedule(3, 0.1, 0.3)
        x = np.random.default_rng(5).standard_normal((5, 5))
        out = df.reverse_step(x, 2, np.zeros_like(x), None, s)
        np.testing.assert_allclose(out, x / np.sqrt(s.alpha[1]), rtol=1e-12)

    def test_hand_value(self):
        s = df.make_schedule(2, 0.1, 0.2)
        x = np.full((2, 2), 0.8)
        eps_hat = np.full((2, 2), 0.5)
        out = df.reverse_step(x, 2, eps_hat, np.zeros_like(x), s)
        expected = (0.8 - (0.2 / np.sqrt(1 - 0.72)) * 0.5) / np.sqrt(0.8)
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        assert abs(expected - 0.6832) < 5e-4

    def test_nonzero_z_at_t1_rejected(self):
        s = df.make_schedule(2, 0.1, 0.2)
        x = np.zeros((3, 3))
        with pytest.raises(ValueError, match="t=1"):
            df.reverse_step(x, 1, x, np.ones_like(x), s)

    def test_z_scaled_by_sigma(self):
        s = df.make_schedule(4, 0.1, 0.4)
        x = np.zeros((3, 3))
        z = np.ones_like(x)
        out = df.reverse_step(x, 3, np.zeros_like(x), z, s)
        np.testing.assert_allclose(out, s.sigma[2], rtol=1e-12)


class TestLossSimple:
    def test_perfect_prediction(self):
        e = np.random.default_rng(6).standard_normal((4, 4))
        assert df.loss_simple(e, e.copy()) == 0.0

    def test_zero_prediction_collapses_to_mean_square(self):
        e = np.random.default_rng(7).standard_normal((4, 4))
        assert abs(df.loss_simple(e, np.zeros_like(e)) - np.mean(e**2)) < 1e-12

    def test_hand_value(self):
        e = np.ones((3, 3))
        assert abs(df.loss_simple(e, np.full_like(e, 0.5)) - 0.25) < 1e-12

    def test_tensor_path_matches_array_path(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal((2, 5, 5))
        t = df.loss_simple(a, Tensor(b))
        assert isinstance(t, Tensor)
        assert abs(t.item() - df.loss_simple(a, b)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            df.loss_simple(np.zeros((2, 2)), np.zeros((3, 3)))


class TestTraining:
    def _setup(self, n_pairs=4):
        cfg = tiny_predictor_config(input_size=16)
        texs = synthetic_textures(2, 32, seed=0)
        pairs = make_dataset(texs, SpeckleParams(1.0), 16, n_pairs, seed=1)
        params = init_params(cfg, seed=0)
        return cfg, pairs, params

    def test_returned_loss_matches_objective(self, monkeypatch):
        cfg, pairs, params = self._setup()
        sched = df.make_schedule(10)
        state = AdamState.for_params(params)
        captured = {}

        import specklediff.diffusion as mod
        orig = mod.predict_noise

        def spy(x_t, x_s, t, p, c):
            out = orig(x_t, x_s, t, p, c)
            captured["eps_hat"] = out.data.copy()
            return out

        monkeypatch.setattr(mod, "predict_noise", spy)
        rng = np.random.default_rng(0)
        clean, speck = df._stack_batch(pairs, np.array([0, 1]))
        rng_clone = np.random.default_rng(0)
        t = rng_clone.integers(1, 11, size=2)
        eps = rng_clone.standard_normal(clean.shape, dtype=np.float32)
        value, _, _ = df.train_step(clean, speck, params, state, sched, cfg, rng, lr=1e-3)
        assert abs(value - df.loss_simple(eps, captured["eps_hat"])) < 1e-7

    def test_identical_seed_identical_trajectory(self):
        cfg, pairs, params = self._setup()
        tc = df.TrainConfig(iterations=5, batch_size=2, learning_rate=1e-3, T=10, seed=3)
        r1 = df.train(pairs, init_params(cfg, seed=0), cfg, tc)
        r2 = df.train(pairs, init_params(cfg, seed=0), cfg, tc)
        assert r1.losses == r2.losses
        for k in r1.params:
            assert r1.params[k].data.tobytes() == r2.params[k].data.tobytes()

    def test_log_records_are_line_delimited_json(self, tmp_path):
        import json

        cfg, pairs, params = self._setup()
        tc = df.TrainConfig(iterations=3, batch_size=1, learning_rate=1e-3, T=10, seed=0)
        log = tmp_path / "log.jsonl"
        df.train(pairs, params, cfg, tc, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
        recs = [json.loads(line) for line in lines]
        assert [r["iteration"] for r in recs] == [1, 2, 3]
        assert all("loss" in r and "elapsed_s" in r for r in recs)

    def test_checkpoint_callback_interval(self):
        cfg, pairs, params = self._setup()
        seen = []
        tc = df.TrainConfig(iterations=5, batch_size=1, learning_rate=1e-3, T=10, seed=0, checkpoint_interval=2)
        df.train(pairs, params, cfg, tc, checkpoint_fn=lambda it, p, s: seen.append(it))
        assert seen == [2, 4, 5]

    @pytest.mark.slow
    def test_single_pair_overfit(self):
        # 500 steps on one fixed pair must cut the loss to < 0.1x its start.
        cfg = tiny_predictor_config(input_size=32)
        texs = synthetic_textures(1, 48, seed=2)
        pairs = make_dataset(texs, SpeckleParams(1.0), 32, 1, seed=3)
        params = init_params(cfg, seed=0)
        sched = df.make_schedule(100)
        state = AdamState.for_params(params)
        rng = np.random.default_rng(0)
        clean, speck = df._stack_batch(pairs, np.zeros(1, int))
        first = None
        value = None
        for _ in range(500):
            value, params, state = df.train_step(
                clean, speck, params, state, sched, cfg, rng, lr=1e-3
            )
            if first is None:
                first = value
        assert value < 0.1 * first
