import numpy as np
import pytest

from src.telemetry import (
    ChannelTracker,
    TelemetryRecord,
    TelemetryStream,
    TELEMETRY_FIELDS,
    gradient_coherence,
    instability_index,
    performance_trend,
    recompute_channels,
    state_persistence,
)
from src.utils import ConfigurationError, ContractViolationError


def test_coherence_of_identical_gradients_is_one():
    g = np.array([1.0, -2.0, 0.5])
    assert gradient_coherence([g, 2 * g, 3 * g]) == pytest.approx(1.0)
    assert gradient_coherence([g, g], mode="to-mean") == pytest.approx(1.0)


def test_coherence_of_opposite_and_orthogonal_gradients():
    assert gradient_coherence([np.array([1.0, 0.0]), np.array([-1.0, 0.0])]) == pytest.approx(-1.0)
    assert gradient_coherence([np.array([1.0, 0.0]), np.array([0.0, 1.0])]) == pytest.approx(0.0)


def test_zero_gradients_contribute_zero_similarity():
    g = np.array([1.0, 1.0])
    assert gradient_coherence([g, np.zeros(2)]) == 0.0
    assert gradient_coherence([g, g, np.zeros(2)]) == pytest.approx(1.0 / 3.0)


def test_non_finite_gradients_give_zero():
    assert gradient_coherence([np.array([np.nan, 1.0]), np.array([1.0, 1.0])]) == 0.0


def test_coherence_rejects_bad_inputs():
    with pytest.raises(ContractViolationError):
        gradient_coherence([np.ones(3)])
    with pytest.raises(ContractViolationError):
        gradient_coherence([np.ones(3), np.ones(4)])


def test_instability_index_is_population_variance_of_window():
    assert instability_index([1.0, 2.0, 3.0, 4.0], window=2) == pytest.approx(0.25)
    assert instability_index([5.0]) == 0.0
    with pytest.raises(ContractViolationError):
        instability_index([])


def test_performance_trend_ema():
    assert performance_trend(None, 3.0) == 3.0
    assert performance_trend(1.0, 3.0, alpha=0.5) == pytest.approx(2.0)
    for alpha in (0.0, 1.5):
        with pytest.raises(ConfigurationError):
            performance_trend(1.0, 2.0, alpha=alpha)


def test_state_persistence_ema():
    assert state_persistence(1.0, 2.0, decay=0.9) == pytest.approx(1.1)
    with pytest.raises(ContractViolationError):
        state_persistence(0.0, -1.0)


def test_recompute_matches_online_tracker():
    rng = np.random.default_rng(0)
    perf = rng.normal(size=60).tolist()
    norms = np.abs(rng.normal(size=60)).tolist()
    grads = [[rng.normal(size=3) for _ in range(4)] for _ in range(60)]

    tracker = ChannelTracker(window=10, alpha=0.2, decay=0.95)
    online = [tracker.update(j, u, grads=g) for j, u, g in zip(perf, norms, grads)]
    replayed = recompute_channels(perf, norms, [s.x_grad for s in online], window=10, alpha=0.2, decay=0.95)
    assert replayed == online


def test_tracker_requires_gradient_information():
    with pytest.raises(ContractViolationError):
        ChannelTracker().update(1.0, 0.1)


def _record(step: int) -> TelemetryRecord:
    return TelemetryRecord(step=step, performance=-1.0, loss=1.0, x_gen=-1.0, x_inst=0.0,
                           x_grad=0.5, x_mem=0.01, update_norm=0.1)


def test_record_json_has_fixed_field_order():
    line = _record(3).to_json()
    assert list(TelemetryRecord.from_json(line).to_dict()) == list(TELEMETRY_FIELDS)
    assert line.startswith('{"step":3,"J":-1.0')


def test_record_with_missing_field_is_rejected():
    data = _record(0).to_dict()
    del data["x_mem"]
    with pytest.raises(ContractViolationError, match="x_mem"):
        TelemetryRecord.from_dict(data)


def test_stream_enforces_step_order():
    stream = TelemetryStream()
    stream.append(_record(0))
    stream.append(_record(1))
    with pytest.raises(ContractViolationError):
        stream.append(_record(1))
    assert stream.column("step") == [0, 1]
