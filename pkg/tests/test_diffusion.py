import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from placegen.diffusion import (LossReport, NoiseSchedule, ddim_step, make_schedule,
                                masked_denoise_loss, masked_loss_grad, q_sample,
                                strided_steps)


class TestMakeSchedule:
    def test_hand_cumulative_product(self):
        s = make_schedule(2, 0.1, 0.1)
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81], rtol=1e-12)

    def test_constant_schedule_identity(self):
        b = 0.07
        s = make_schedule(5, b, b)
        for t in range(5):
            assert s.alpha_bar[t] == pytest.approx((1 - b) ** (t + 1), rel=1e-12)

    def test_default_schedule_monotone(self):
        s = make_schedule(1000, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] >= 0.99
        assert np.all((s.beta > 0) & (s.beta < 1))
        np.testing.assert_allclose(s.alpha, 1.0 - s.beta)

    @pytest.mark.parametrize("T,lo,hi", [(1, 0.1, 0.2), (0, 0.1, 0.2),
                                         (10, 0.2, 0.1), (10, 0.0, 0.1),
                                         (10, 0.5, 1.0), (10, -0.1, 0.5)])
    def test_rejects_bad_parameters(self, T, lo, hi):
        with pytest.raises(ValueError):
            make_schedule(T, lo, hi)

    def test_schedule_invariant_enforced(self):
        with pytest.raises(ValueError):
            NoiseSchedule(T=2, beta=np.array([0.1, 0.1]),
                          alpha=np.array([0.9, 0.9]),
                          alpha_bar=np.array([0.5, 0.5]))  # not decreasing


def _manual_sched(alpha_bar):
    """Schedule with hand-picked cumulative products (betas only validated)."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    beta = np.full(len(ab), 0.5)
    return NoiseSchedule(T=len(ab), beta=beta, alpha=1 - beta, alpha_bar=ab)


class TestQSample:
    def test_zero_noise_endpoint(self):
        s = _manual_sched([1.0, 0.5])
        x0 = np.random.default_rng(0).standard_normal((4, 4, 3))
        eps = np.random.default_rng(1).standard_normal((4, 4, 3))
        np.testing.assert_array_equal(q_sample(x0, 0, eps, s), x0)

    def test_pure_noise_endpoint(self):
        s = _manual_sched([0.5, 0.0])
        x0 = np.random.default_rng(0).standard_normal((4, 4, 3))
        eps = np.random.default_rng(1).standard_normal((4, 4, 3))
        np.testing.assert_array_equal(q_sample(x0, 1, eps, s), eps)

    def test_monte_carlo_variance(self):
        # x0 = 0, unit-variance noise: output variance must be 1 - a_bar
        s = _manual_sched([0.9, 0.36])
        rng = np.random.default_rng(42)
        eps = rng.standard_normal((120, 120))  # >= 1e4 pixels
        out = q_sample(np.zeros_like(eps), 1, eps, s)
        assert out.var() == pytest.approx(1 - 0.36, rel=0.05)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3))
    @settings(max_examples=25, deadline=None)
    def test_affine_in_inputs(self, a, b):
        s = make_schedule(10, 0.01, 0.2)
        rng = np.random.default_rng(0)
        x1, x2 = rng.standard_normal((2, 5, 5))
        e1, e2 = rng.standard_normal((2, 5, 5))
        lhs = q_sample(a * x1 + b * x2, 4, a * e1 + b * e2, s)
        rhs = a * q_sample(x1, 4, e1, s) + b * q_sample(x2, 4, e2, s)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_shape_mismatch(self):
        s = make_schedule(4, 0.1, 0.1)
        with pytest.raises(ValueError):
            q_sample(np.zeros((3, 3)), 1, np.zeros((4, 4)), s)

    def test_t_out_of_range(self):
        s = make_schedule(4, 0.1, 0.1)
        with pytest.raises(ValueError):
            q_sample(np.zeros((3, 3)), 4, np.zeros((3, 3)), s)

    def test_per_example_batch_indices(self):
        s = make_schedule(10, 0.01, 0.2)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 4, 1))
        e = rng.standard_normal((2, 4, 4, 1))
        out = q_sample(x, np.array([2, 7]), e, s)
        np.testing.assert_allclose(out[0], q_sample(x[0], 2, e[0], s))
        np.testing.assert_allclose(out[1], q_sample(x[1], 7, e[1], s))


class TestMaskedLoss:
    def test_perfect_prediction(self):
        x = np.random.default_rng(0).standard_normal((6, 6, 3))
        rep = masked_denoise_loss(x, x, np.ones((6, 6)))
        assert rep.value == 0.0 and rep.masked_pixel_count == 36

    def test_empty_mask_flagged(self):
        rng = np.random.default_rng(0)
        rep = masked_denoise_loss(rng.standard_normal((6, 6, 3)),
                                  rng.standard_normal((6, 6, 3)), np.zeros((6, 6)))
        assert rep == LossReport(value=0.0, masked_pixel_count=0)

    def test_hand_mean_of_squared_diffs(self):
        # diff = 2 on exactly half the masked pixels, 0 elsewhere -> mean 2
        pred = np.zeros((4, 4, 3))
        true = np.zeros((4, 4, 3))
        mask = np.zeros((4, 4))
        mask[0, :] = 1.0
        mask[1, :] = 1.0
        pred[0, :, :] = 2.0  # 4 of the 8 masked pixels, all channels
        rep = masked_denoise_loss(pred, true, mask)
        assert rep.value == pytest.approx(2.0)
        assert rep.masked_pixel_count == 8

    def test_full_mask_recovers_plain_mse(self):
        rng = np.random.default_rng(3)
        pred = rng.standard_normal((8, 8, 3))
        true = rng.standard_normal((8, 8, 3))
        rep = masked_denoise_loss(pred, true, np.ones((8, 8)))
        assert rep.value == pytest.approx(float(((pred - true) ** 2).mean()), rel=1e-12)

    def test_grad_zero_outside_mask_exact(self):
        rng = np.random.default_rng(4)
        pred = rng.standard_normal((6, 6, 3))
        true = rng.standard_normal((6, 6, 3))
        mask = np.zeros((6, 6))
        mask[2:4, 1:5] = 1.0
        g = masked_loss_grad(pred, true, mask)
        assert np.all(g[mask == 0] == 0.0)
        assert np.any(g[mask == 1] != 0.0)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        pred = rng.standard_normal((5, 5, 2))
        true = rng.standard_normal((5, 5, 2))
        mask = (rng.random((5, 5)) > 0.5).astype(float)
        g = masked_loss_grad(pred, true, mask)
        h = 1e-6
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 0)]:
            orig = pred[idx]
            pred[idx] = orig + h
            lp = masked_denoise_loss(pred, true, mask).value
            pred[idx] = orig - h
            lm = masked_denoise_loss(pred, true, mask).value
            pred[idx] = orig
            assert g[idx] == pytest.approx((lp - lm) / (2 * h), abs=1e-6)


class TestDdimStep:
    def test_algebraic_inversion(self):
        s = make_schedule(50, 1e-3, 0.05)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((6, 6, 3))
        eps = rng.standard_normal((6, 6, 3))
        for t_idx in (0, 20, 49):
            x_t = q_sample(x0, t_idx, eps, s)
            x0_est = ddim_step(x_t, eps, t_idx + 1, s, t_prev=0)
            np.testing.assert_allclose(x0_est, x0, atol=1e-9)

    def test_final_step_is_x0_estimate(self):
        s = make_schedule(10, 0.01, 0.1)
        rng = np.random.default_rng(1)
        x_t = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        ab = s.alpha_bar[0]
        expected = (x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        np.testing.assert_allclose(ddim_step(x_t, eps, 1, s), expected, rtol=1e-12)

    def test_fixed_predictor_trajectory_bit_identical(self):
        s = make_schedule(20, 1e-3, 0.05)

        def run():
            x = np.random.default_rng(9).standard_normal((5, 5)).astype(np.float32)
            for t in range(20, 0, -1):
                eps = np.tanh(x)  # fixed deterministic predictor
                x = ddim_step(x, eps, t, s)
            return x

        np.testing.assert_array_equal(run(), run())

    @pytest.mark.parametrize("t,t_prev", [(0, None), (21, None), (5, 5), (5, 7), (5, -1)])
    def test_step_range_errors(self, t, t_prev):
        s = make_schedule(20, 1e-3, 0.05)
        with pytest.raises(ValueError):
            ddim_step(np.zeros((3, 3)), np.zeros((3, 3)), t, s, t_prev=t_prev)


class TestStridedSteps:
    def test_endpoints_and_monotone(self):
        ts = strided_steps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 50
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_dense_when_steps_exceed_T(self):
        assert strided_steps(10, 50) == list(range(10, 0, -1))
        assert strided_steps(10, 10) == list(range(10, 0, -1))
