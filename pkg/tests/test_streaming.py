import time

import numpy as np
import pytest

from modules.backbones import FrozenBackbone, ScalerParams, SeasonalNaive, fit_backbone
from modules.errors import InvalidConfig, LeakageError, SequenceError
from modules.spectral import CalibratorParams, ParamGrads, build_group_layout, calibrate
from modules.streaming import (
    OptimizerState,
    StreamingCalibrator,
    StreamQueue,
    WindowSample,
    descent_check,
    flash_update,
    load_snapshot,
    optimizer_step,
    save_snapshot,
)

LAYOUT_1 = build_group_layout(3, 1)


def window(origin, n_nodes=1, lookback=12, horizon=12, value=0.0):
    return WindowSample(np.full((n_nodes, lookback), value), np.full((n_nodes, horizon), value), origin)


def tone_stream(length, horizon=12, gain=2.0):
    """Windows whose label is gain x a period-12 cosine."""
    cosine = np.cos(2 * np.pi * np.arange(horizon) / 12.0)[None, :]
    return [WindowSample(np.zeros((1, 12)), gain * cosine, t) for t in range(length)], cosine


class TestQueue:
    def test_strict_dequeues_after_capacity(self):
        queue = StreamQueue(12, "strict")
        dequeued = [queue.push(window(t)) for t in range(14)]
        assert all(d is None for d in dequeued[:12])
        assert dequeued[12].origin_index == 0
        assert dequeued[13].origin_index == 1

    def test_listing_dequeues_when_full(self):
        queue = StreamQueue(12, "listing")
        dequeued = [queue.push(window(t)) for t in range(13)]
        assert dequeued[10] is None
        assert dequeued[11].origin_index == 0

    def test_out_of_order_push(self):
        queue = StreamQueue(3)
        queue.push(window(5))
        with pytest.raises(SequenceError):
            queue.push(window(5))

    def test_unknown_rule(self):
        with pytest.raises(InvalidConfig):
            StreamQueue(3, "lifo")

    def test_strict_never_leaks(self):
        queue = StreamQueue(12)
        for t in range(5000):
            current = window(t)
            old = queue.push(current)
            if old is not None:
                assert t - old.origin_index == 12
                assert old.label_last_index == current.input_last_index


class TestOptimizer:
    def test_sgd_step(self):
        params = CalibratorParams(np.zeros((1, 1)), np.zeros((1, 1)), LAYOUT_1)
        grads = ParamGrads(np.array([[2.0]]), np.array([[0.0]]))
        updated = optimizer_step(params, grads, OptimizerState("sgd", 0.1))
        assert updated.lambda_alpha[0, 0] == pytest.approx(-0.2)

    def test_sgd_zero_gradient(self):
        params = CalibratorParams(np.full((1, 1), 0.3), np.full((1, 1), -0.1), LAYOUT_1)
        grads = ParamGrads(np.zeros((1, 1)), np.zeros((1, 1)))
        updated = optimizer_step(params, grads, OptimizerState("sgd", 0.1))
        np.testing.assert_array_equal(updated.as_vector(), params.as_vector())

    def test_adam_first_step(self):
        params = CalibratorParams(np.zeros((1, 1)), np.zeros((1, 1)), LAYOUT_1)
        grads = ParamGrads(np.array([[5.0]]), np.array([[0.0]]))
        opt = OptimizerState("adam", 1e-4)
        updated = optimizer_step(params, grads, opt)
        assert updated.lambda_alpha[0, 0] == pytest.approx(-1e-4, rel=1e-6)
        assert updated.lambda_phi[0, 0] == 0.0
        assert opt.step_count == 1

    def test_adam_matches_hand_recurrence(self, rng):
        params = CalibratorParams(np.zeros((2, 3)), np.zeros((2, 3)), build_group_layout(7, 2))
        opt = OptimizerState("adam", 1e-2)
        theta = params.as_vector()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for t in range(1, 6):
            g = rng.standard_normal(theta.size)
            grads = ParamGrads(g[:6].reshape(2, 3), g[6:].reshape(2, 3))
            params = optimizer_step(params, grads, opt)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g ** 2
            theta = theta - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params.as_vector(), theta, rtol=1e-12, atol=1e-15)

    def test_clip(self):
        params = CalibratorParams(np.zeros((1, 1)), np.zeros((1, 1)), LAYOUT_1)
        grads = ParamGrads(np.array([[-50.0]]), np.array([[50.0]]))
        updated = optimizer_step(params, grads, OptimizerState("sgd", 1.0), clip_eps=0.1)
        assert updated.lambda_alpha[0, 0] == 0.1
        assert updated.lambda_phi[0, 0] == -0.1


class TestFlashUpdate:
    def test_sgd_step_length_is_eta_times_gradient(self, rng, identity_backbone):
        backbone = identity_backbone()
        params = CalibratorParams.zeros(3, build_group_layout(7, 4))
        for origin in range(1000):
            sample = WindowSample(rng.standard_normal((3, 12)), rng.standard_normal((3, 12)), origin)
            opt = OptimizerState("sgd", 1e-4)
            updated, outcome = flash_update(sample, backbone, params, opt, loss="mse", track_descent=True)
            assert outcome.param_delta_norm == pytest.approx(1e-4 * outcome.grad_norm, rel=1e-12)
            if outcome.grad_norm > 1e-10:
                assert outcome.loss_after_update < outcome.loss_before_update
            params = updated

    def test_zero_gradient_leaves_params(self, identity_backbone):
        backbone = identity_backbone(4)
        sample = WindowSample(np.array([[1.0, 0.0, -1.0, 0.0]]), np.array([[1.0, 0.0, -1.0, 0.0]]), 0)
        params = CalibratorParams.zeros(1, LAYOUT_1)
        updated, outcome = flash_update(sample, backbone, params, OptimizerState("sgd", 0.1), loss="mse")
        assert outcome.param_delta_norm == 0.0
        np.testing.assert_array_equal(updated.as_vector(), params.as_vector())

    def test_fully_masked_label_skips(self, identity_backbone):
        sample = WindowSample(np.zeros((1, 12)), np.full((1, 12), np.nan), 0)
        params = CalibratorParams.zeros(1, build_group_layout(7, 4))
        opt = OptimizerState("adam", 1e-4)
        updated, outcome = flash_update(sample, identity_backbone(), params, opt)
        assert outcome.skipped == "masked"
        assert opt.step_count == 0
        assert updated is params

    def test_several_samples_average_their_gradients(self, rng, identity_backbone):
        backbone = identity_backbone()
        params = CalibratorParams.zeros(2, build_group_layout(7, 4))
        first = WindowSample(rng.standard_normal((2, 12)), rng.standard_normal((2, 12)), 0)
        second = WindowSample(rng.standard_normal((2, 12)), rng.standard_normal((2, 12)), 1)
        both, _ = flash_update([first, second], backbone, params, OptimizerState("sgd", 0.1), loss="mse")
        one, _ = flash_update(first, backbone, params, OptimizerState("sgd", 0.1), loss="mse")
        two, _ = flash_update(second, backbone, params, OptimizerState("sgd", 0.1), loss="mse")
        np.testing.assert_allclose(both.as_vector(), 0.5 * (one.as_vector() + two.as_vector()), atol=1e-12)

    def test_update_steps_repeat_the_step(self, rng, identity_backbone):
        sample = WindowSample(rng.standard_normal((1, 12)), rng.standard_normal((1, 12)), 0)
        opt = OptimizerState("adam", 1e-3)
        flash_update(sample, identity_backbone(), CalibratorParams.zeros(1, build_group_layout(7, 4)), opt, update_steps=3)
        assert opt.step_count == 3


class TestEngine:
    def test_warm_up_is_identity(self, rng, identity_backbone):
        samples = [WindowSample(rng.standard_normal((2, 12)), rng.standard_normal((2, 12)), t) for t in range(30)]
        on = StreamingCalibrator(identity_backbone(), 2, learning_rate=1e-2).run_stream(samples)
        off = StreamingCalibrator(identity_backbone(), 2, enabled=False).run_stream(samples)
        np.testing.assert_allclose(on.forecasts[:13], off.forecasts[:13], atol=1e-12)
        assert not np.allclose(on.forecasts[13:], off.forecasts[13:])

    def test_every_forecast_uses_params_from_before_the_step(self, rng):
        t = np.arange(400)
        train = 10 + 3 * np.sin(2 * np.pi * t / 12)[None, :] + rng.standard_normal((2, 400))
        backbone = fit_backbone(train, 0, "ridge", 12)
        engine = StreamingCalibrator(backbone, 2, learning_rate=1e-2)
        for origin in range(60):
            sample = WindowSample(rng.standard_normal((2, 12)) + 10, rng.standard_normal((2, 12)) + 10, origin)
            before = engine.params.copy()
            forecast, _ = engine.stream_step(sample)
            expected = backbone.scaler.inverse_transform(calibrate(backbone.forecast(sample), before).values)
            np.testing.assert_array_equal(forecast.values, expected)
        assert engine.opt.step_count == 60 - 12

    def test_backbone_is_untouched_by_updates(self, rng):
        t = np.arange(400)
        train = 10 + 3 * np.sin(2 * np.pi * t / 12)[None, :] + rng.standard_normal((3, 400))
        backbone = fit_backbone(train, 0, "ridge", 12)
        held_window = WindowSample(train[:, 200:212], train[:, 212:224], 200)
        reference = backbone.forecast(held_window).values.copy()
        coefficients = backbone.model.coefficients.copy()
        scaler_mean = np.array(backbone.scaler.mean, copy=True)

        engine = StreamingCalibrator(backbone, 3, learning_rate=5e-2)
        engine.run_stream([WindowSample(train[:, o:o + 12], train[:, o + 12:o + 24], o) for o in range(150)])
        assert engine.opt.step_count == 150 - 12

        np.testing.assert_array_equal(backbone.forecast(held_window).values, reference)
        np.testing.assert_array_equal(backbone.model.coefficients, coefficients)
        np.testing.assert_array_equal(backbone.scaler.mean, scaler_mean)

    def test_first_update_at_step_horizon(self, rng, identity_backbone):
        engine = StreamingCalibrator(identity_backbone(), 1)
        logs = [engine.stream_step(window(t, value=float(t)))[1] for t in range(13)]
        assert all(log.dequeued_origin is None for log in logs[:12])
        assert logs[12].dequeued_origin == 0
        assert engine.opt.step_count == 1

    def test_listing_rule_records_leaks(self, identity_backbone):
        engine = StreamingCalibrator(identity_backbone(), 1, queue_rule="listing")
        result = engine.run_stream([window(t) for t in range(20)])
        assert result.leak_count == 20 - 12 + 1
        assert engine.opt.step_count == 20 - 12 + 1

    def test_leak_in_strict_mode_raises(self, identity_backbone):
        engine = StreamingCalibrator(identity_backbone(), 1)
        # one slot short: the label of window 0 ends one step past the input of window 11
        engine.queue = StreamQueue(11, "strict")
        for t in range(11):
            engine.stream_step(window(t))
        with pytest.raises(LeakageError):
            engine.stream_step(window(11))

    def test_stride_must_be_one(self, identity_backbone):
        engine = StreamingCalibrator(identity_backbone(), 1)
        engine.stream_step(window(0))
        with pytest.raises(SequenceError):
            engine.stream_step(window(2))

    def test_gain_tracks_doubled_tone(self, constant_forecaster):
        samples, cosine = tone_stream(200)
        engine = StreamingCalibrator(constant_forecaster(cosine), 1, optimizer="sgd", learning_rate=0.01, loss="mse")
        gains = []
        expected = 0.0
        for sample in samples:
            engine.stream_step(sample)
            gains.append(1.0 + engine.params.lambda_alpha[1, 0])
        for _ in range(200 - 12):
            expected = expected - 0.01 * 2 * (expected - 1.0) * 0.5
        assert np.all(np.diff(gains) >= -1e-15)
        assert gains[-1] == pytest.approx(1.0 + expected, abs=1e-9)
        assert 1.0 < gains[-1] < 2.0

    def test_calibrated_mae_beats_uncalibrated_on_doubled_tone(self, constant_forecaster):
        samples, cosine = tone_stream(200)
        on = StreamingCalibrator(constant_forecaster(cosine), 1, optimizer="sgd", learning_rate=0.01, loss="mse")
        off = StreamingCalibrator(constant_forecaster(cosine), 1, enabled=False)
        mae_on = np.mean(np.abs(on.run_stream(samples).forecasts - 2 * cosine))
        mae_off = np.mean(np.abs(off.run_stream(samples).forecasts - 2 * cosine))
        assert mae_on < mae_off

    def test_update_latency_at_thousand_nodes(self, rng):
        backbone = FrozenBackbone(SeasonalNaive(12), ScalerParams(0.0, 1.0), 12, 12)
        engine = StreamingCalibrator(backbone, 1000)
        samples = [WindowSample(rng.standard_normal((1000, 12)), rng.standard_normal((1000, 12)), t) for t in range(100)]
        started = time.perf_counter()
        for sample in samples:
            engine.stream_step(sample)
        mean = (time.perf_counter() - started) / len(samples)
        assert engine.params.n_params == 8000
        assert mean < 0.010


class TestDescentCheck:
    def test_cosine_surrogate(self, identity_backbone):
        cosine = np.array([[1.0, 0.0, -1.0, 0.0]])
        report = descent_check(
            WindowSample(cosine, 2 * cosine, 0),
            identity_backbone(4),
            CalibratorParams.zeros(1, LAYOUT_1),
            [0.5, 1.0, 1.9, 2.5],
        )
        assert report.lipschitz_estimate == pytest.approx(1.0, abs=1e-6)
        assert [e.decreased for e in report.entries] == [True, True, True, False]
        assert report.largest_guaranteed_eta == 1.9

    def test_zero_gradient_point(self, identity_backbone):
        cosine = np.array([[1.0, 0.0, -1.0, 0.0]])
        report = descent_check(
            WindowSample(cosine, cosine, 0), identity_backbone(4), CalibratorParams.zeros(1, LAYOUT_1), [1e-4, 10.0]
        )
        assert report.grad_norm == 0.0
        assert all(e.non_increasing for e in report.entries)

    def test_stiff_case_reports_failing_eta(self, identity_backbone):
        cosine = np.array([[1.0, 0.0, -1.0, 0.0]])
        report = descent_check(
            WindowSample(10 * cosine, 20 * cosine, 0),
            identity_backbone(4),
            CalibratorParams.zeros(1, LAYOUT_1),
            [1e-4, 1e-2, 10.0],
        )
        assert report.entries[0].decreased
        assert not report.entries[-1].decreased

    def test_rejects_mae(self, identity_backbone):
        with pytest.raises(InvalidConfig):
            descent_check(window(0), identity_backbone(), CalibratorParams.zeros(1, build_group_layout(7, 4)), [1e-4], loss="mae")


class TestSnapshot:
    def test_round_trip(self, tmp_path, rng):
        layout = build_group_layout(7, 4)
        params = CalibratorParams(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)), layout, "amplitude")
        opt = OptimizerState("adam", 1e-3)
        params = optimizer_step(params, ParamGrads(rng.standard_normal((4, 5)), np.zeros((4, 5))), opt)
        path = tmp_path / "calib.npz"
        save_snapshot(path, params, opt)
        loaded, loaded_opt = load_snapshot(path)
        np.testing.assert_array_equal(loaded.as_vector(), params.as_vector())
        assert loaded.layout == layout
        assert loaded.modulation == "amplitude"
        assert loaded_opt.step_count == 1
        np.testing.assert_array_equal(loaded_opt.first_moment, opt.first_moment)
        assert list(tmp_path.iterdir()) == [path]
