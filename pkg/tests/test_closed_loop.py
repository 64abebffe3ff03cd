import pytest
from pydantic import ValidationError

from src.core import ClosedLoopProbe, StreakState, closed_loop_step
from src.core.closed_loop import simulate_probe
from src.utils.config import ClosedLoopConfig


CONFIG = ClosedLoopConfig(enabled=True, kappa=2.0, consecutive=3, damp=0.5, max_activations=2,
                          lr_floor_frac=0.3)


def test_quiet_scores_never_fire():
    probe = simulate_probe([0.0, 1.0, 2.0, 1.5] * 10, CONFIG)
    assert probe.actions == []
    assert len(probe.evaluations) == 40
    assert probe.lr_scale == 1.0


def test_fires_once_on_the_mth_consecutive_step():
    probe = simulate_probe([0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], CONFIG)
    assert [a.step for a in probe.actions] == [3]
    assert probe.actions[0].kind == "lr-damp"
    assert [e.fired for e in probe.evaluations] == [False, False, False, True, False, False, False]


def test_streak_resets_below_threshold():
    probe = simulate_probe([3.0, 3.0, 0.0, 3.0, 3.0, 0.0], CONFIG)
    assert probe.actions == []
    assert [e.streak for e in probe.evaluations] == [1, 2, 0, 1, 2, 0]


def test_budget_caps_activations_and_floor_limits_damping():
    episode = [3.0, 3.0, 3.0, 0.0]
    probe = simulate_probe(episode * 4, CONFIG)
    assert len(probe.actions) == 2
    assert [a.lr_scale for a in probe.actions] == [0.5, 0.3]
    assert probe.lr_scale == 0.3


def test_step_function_is_pure():
    state = StreakState()
    new_state, action = closed_loop_step(5.0, state, CONFIG, 0)
    assert state == StreakState()
    assert new_state.streak == 1 and action is None


def test_probe_logs_every_evaluation():
    probe = ClosedLoopProbe(CONFIG)
    probe.observe(0, 2.5)
    line = probe.evaluations[0].to_json()
    assert line == '{"step":0,"deviation":2.5,"streak":1,"fired":false,"activations":0,"lr_scale":1.0}'


def test_damping_must_reduce_lr():
    with pytest.raises(ValidationError):
        ClosedLoopConfig(damp=1.0)
