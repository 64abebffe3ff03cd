import numpy as np
import pytest
from pydantic import ValidationError

from src.analyzers import (
    MonitorConfig,
    deviation_score,
    deviation_scores,
    encode_step,
    encode_stream,
    fit_monitor,
    meta_state_deviation,
    monitor_loss_and_grads,
    reference_latent,
    restore_latents,
    restore_model,
    serialize_latents,
    serialize_model,
)
from src.analyzers.meta_state import one_step_loss
from src.utils import CheckpointCorruptionError, ContractViolationError, MonitorTrainingError


SMALL = MonitorConfig(latent_dim=4, epochs=3, bptt_window=16, min_steps=50)


def _streams(count=3, steps=80, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t = np.arange(steps)[:, None]
        out.append(np.sin(t / 10.0 + rng.uniform(0, 3, size=6)) + 0.1 * rng.normal(size=(steps, 6)))
    return out


def test_fit_is_deterministic():
    a = fit_monitor(_streams(), SMALL)
    b = fit_monitor(_streams(), SMALL)
    assert a.bitwise_equal(b)
    assert len(a.loss_history) == 3
    assert np.isfinite(a.final_loss)


def test_fit_keeps_recurrence_contractive():
    model = fit_monitor(_streams(), SMALL.model_copy(update={"lr": 0.5}))
    assert model.spectral_radius <= 1.0 + 1e-9


def test_latents_are_bounded_and_shaped():
    model = fit_monitor(_streams(), SMALL)
    latents = encode_stream(model, _streams(count=1, seed=9)[0] * 1e3)
    assert latents.shape == (80, 4)
    assert np.all(np.abs(latents) <= 1.0)


def test_encode_step_checks_dimensions():
    model = fit_monitor(_streams(), SMALL)
    with pytest.raises(ContractViolationError):
        encode_step(model, np.zeros(3), np.zeros(6))
    with pytest.raises(ContractViolationError):
        encode_step(model, np.zeros(4), np.zeros(5))


def test_deviation_scores_match_per_step_scores():
    model = fit_monitor(_streams(), SMALL)
    latents = encode_stream(model, _streams(count=1, seed=4)[0])
    batch = deviation_scores(model, latents)
    assert np.allclose(batch, [deviation_score(model, h, step) for step, h in enumerate(latents)])
    unaligned = deviation_scores(model, latents, start=None)
    assert np.allclose(unaligned, [deviation_score(model, h) for h in latents])


def test_constant_channels_do_not_break_fit():
    streams = [np.hstack([s[:, :3], np.ones((80, 3))]) for s in _streams()]
    model = fit_monitor(streams, SMALL)
    assert model.norm_stats.degenerate.tolist() == [False, False, False, True, True, True]
    assert np.all(np.isfinite(deviation_scores(model, encode_stream(model, streams[0]))))


def test_fit_requires_enough_calibration_data():
    with pytest.raises(MonitorTrainingError):
        fit_monitor(_streams(count=2), SMALL)
    with pytest.raises(MonitorTrainingError):
        fit_monitor(_streams(steps=30), SMALL)


def _window_loss(A, B, C, Y, h0):
    return monitor_loss_and_grads(A, B, C, Y, h0)[0]


def test_bptt_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    k, m, length = 3, 6, 5
    A = rng.normal(0, 0.4, size=(k, k))
    B = rng.normal(0, 0.4, size=(k, m))
    C = rng.normal(0, 0.4, size=(m, k))
    Y = rng.normal(size=(length, m))
    h0 = rng.uniform(-0.5, 0.5, size=k)

    _, dA, dB, dC, _ = monitor_loss_and_grads(A, B, C, Y, h0)
    eps = 1e-6
    for matrix, grad, slot in ((A, dA, 0), (B, dB, 1), (C, dC, 2)):
        numeric = np.zeros_like(matrix)
        for idx in np.ndindex(matrix.shape):
            args_up = [A.copy(), B.copy(), C.copy()]
            args_down = [A.copy(), B.copy(), C.copy()]
            args_up[slot][idx] += eps
            args_down[slot][idx] -= eps
            numeric[idx] = (_window_loss(*args_up, Y, h0) - _window_loss(*args_down, Y, h0)) / (2 * eps)
        assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-8)


def test_loss_is_invariant_to_signed_permutation_of_latents():
    model = fit_monitor(_streams(), SMALL)
    P = np.zeros((4, 4))
    for row, (col, sign) in enumerate([(2, 1.0), (0, -1.0), (3, -1.0), (1, 1.0)]):
        P[row, col] = sign
    permuted = fit_monitor(_streams(), SMALL)
    permuted.A = P @ model.A @ P.T
    permuted.B = P @ model.B
    permuted.C = model.C @ P.T
    streams = _streams(seed=5)
    assert one_step_loss(permuted, streams) == pytest.approx(one_step_loss(model, streams), rel=1e-10)


def test_model_serialization_round_trip_and_corruption():
    model = fit_monitor(_streams(), SMALL)
    blob = serialize_model(model)
    assert restore_model(blob).bitwise_equal(model)

    damaged = bytearray(blob)
    damaged[30] ^= 0x01
    with pytest.raises(CheckpointCorruptionError):
        restore_model(bytes(damaged))
    with pytest.raises(CheckpointCorruptionError):
        restore_model(blob[:20])


def test_latent_file_carries_config_hash():
    latents = np.arange(12, dtype=np.float64).reshape(6, 2)
    restored, digest = restore_latents(serialize_latents(latents, "0123456789abcdef"))
    assert digest == "0123456789abcdef"
    assert restored.tobytes() == latents.tobytes()
    with pytest.raises(CheckpointCorruptionError):
        restore_latents(serialize_latents(latents, "0123456789abcdef")[:-8])


def _baseline_streams(seeds, steps=200):
    """全シード共通の学習曲線 + シードごとのノイズ"""
    t = np.arange(steps)[:, None] / steps
    curve = np.hstack([np.exp(-3.0 * t), 1.0 - np.exp(-2.0 * t), np.cos(4.0 * t),
                       0.5 * t, np.exp(-t), np.sin(3.0 * t)])
    return [curve + 0.05 * np.random.default_rng(seed).normal(size=curve.shape) for seed in seeds]


CALIBRATED = MonitorConfig(latent_dim=4, epochs=10, bptt_window=32, min_steps=100)


def test_held_out_runs_stay_inside_calibrated_band():
    model = fit_monitor(_baseline_streams([1, 2, 3]), CALIBRATED)
    assert model.score_scale >= 1.0
    for raw in _baseline_streams([11, 12, 13, 14, 15]):
        scores = deviation_scores(model, encode_stream(model, raw))
        assert np.mean(scores <= 3.0) >= 0.99


def test_shifted_run_scores_far_outside_band():
    model = fit_monitor(_baseline_streams([1, 2, 3]), CALIBRATED)
    shifted = _baseline_streams([11])[0]
    shifted[100:, 4] += 20.0
    scores = deviation_scores(model, encode_stream(model, shifted))
    assert np.max(scores[100:]) > 6.0


def test_fit_stops_early_and_keeps_best_holdout_epoch():
    config = CALIBRATED.model_copy(update={"epochs": 60, "patience": 2, "lr": 0.2})
    streams = _baseline_streams([1, 2, 3])
    model = fit_monitor(streams, config)

    assert len(model.loss_history) == len(model.holdout_history) == model.epochs
    assert model.best_epoch == int(np.argmin(model.holdout_history)) + 1
    assert model.final_loss == min(model.holdout_history)
    if model.epochs < 60:
        assert model.epochs - model.best_epoch == 2
    assert one_step_loss(model, streams[-1:]) == pytest.approx(model.final_loss, rel=1e-12)


def test_reference_track_is_step_aligned():
    model = fit_monitor(_streams(), SMALL)
    assert model.track_length == 80
    assert deviation_score(model, model.baseline_track[10], 10) == 0.0
    assert deviation_score(model, model.baseline_track[-1], 500) == 0.0
    assert np.array_equal(reference_latent(model, None), model.baseline_mean)
    assert np.array_equal(reference_latent(model, 5), model.baseline_track[5])


def test_reference_runs_must_leave_training_runs():
    with pytest.raises(ValidationError):
        MonitorConfig(min_runs=3, reference_runs=3)


def test_meta_state_deviation_survives_signed_permutation_of_model():
    model = fit_monitor(_streams(), SMALL)
    P = np.zeros((4, 4))
    for row, (col, sign) in enumerate([(1, -1.0), (3, 1.0), (0, 1.0), (2, -1.0)]):
        P[row, col] = sign
    permuted = fit_monitor(_streams(), SMALL)
    permuted.A = P @ model.A @ P.T
    permuted.B = P @ model.B
    permuted.C = model.C @ P.T
    raw = _streams(count=1, seed=6)[0]
    left = meta_state_deviation(encode_stream(model, raw), 30, horizon=40).value
    right = meta_state_deviation(encode_stream(permuted, raw), 30, horizon=40).value
    assert right == pytest.approx(left, rel=1e-10)
