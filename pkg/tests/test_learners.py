import numpy as np
import pytest

from src.learners import (
    LearnerConfig,
    Task,
    build_learner,
    evaluate,
    init_learner,
)
from src.utils import ConfigurationError, ContractViolationError


TASKS = {
    "quadratic": Task(kind="quadratic", dim=5, batch_size=16, subbatches=4),
    "logistic": Task(kind="logistic", dim=4, batch_size=16, subbatches=4, label_noise=0.1),
    "mlp-classify": Task(kind="mlp-classify", dim=4, hidden=5, classes=3, batch_size=16, subbatches=4),
    "bandit-policy": Task(kind="bandit-policy", arms=4, batch_size=16, subbatches=4),
}


def _config(kind: str) -> LearnerConfig:
    return LearnerConfig(entropy_coef=0.2) if kind == "bandit-policy" else LearnerConfig()


def _finite_difference(fn, params, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.shape[0]):
        up, down = params.copy(), params.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2 * eps)
    return grad


@pytest.mark.parametrize("kind", sorted(TASKS))
def test_gradient_matches_finite_differences(kind):
    learner = build_learner(TASKS[kind], _config(kind))
    for instance in range(100):
        rng = np.random.default_rng(instance)
        state = learner.init_state(instance)
        state.params = rng.normal(0.0, 0.5, size=learner.num_params)
        batch = learner.instance.draw_batch(instance, 0)
        context = learner.prepare_context(state, batch)

        analytic = learner.gradient(state.params, batch, context)
        numeric = _finite_difference(lambda p: learner.objective(p, batch, context), state.params)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-7), kind


@pytest.mark.parametrize("kind", sorted(TASKS))
def test_subbatch_gradients_average_to_batch_gradient(kind):
    learner = build_learner(TASKS[kind], _config(kind))
    state = learner.init_state(3)
    batch = learner.instance.draw_batch(3, 7)
    context = learner.prepare_context(state, batch)

    full = learner.gradient(state.params, batch, context)
    parts = [learner.gradient(state.params, batch, context, idx) for idx in batch.splits]
    assert np.allclose(np.mean(parts, axis=0), full, atol=1e-12)


def test_sgd_step_is_closed_form():
    task = Task(kind="quadratic", dim=6, batch_size=8, subbatches=2, curvature_min=0.5, curvature_max=1.0)
    learner = build_learner(task, LearnerConfig(optimizer="sgd", lr=0.3))
    state = learner.init_state(11)
    batch = learner.instance.draw_batch(11, 0)

    new_state, raw = learner.train_step(state, batch)

    expected = state.params - 0.3 * learner.instance.curvatures * (state.params - batch.inputs.mean(axis=0))
    assert np.allclose(new_state.params, expected, rtol=0.0, atol=1e-14)
    assert new_state.step_index == 1
    assert raw.update_norm == pytest.approx(float(np.linalg.norm(new_state.params - state.params)))
    assert len(raw.subbatch_grads) == 2


def test_adam_first_step_moves_by_lr_along_sign():
    task = TASKS["logistic"]
    learner = build_learner(task, LearnerConfig(optimizer="adam", lr=0.01))
    state = learner.init_state(2)
    batch = learner.instance.draw_batch(2, 0)
    grad = learner.gradient(state.params, batch, None)

    new_state, _ = learner.train_step(state, batch)

    assert np.allclose(new_state.params - state.params, -0.01 * np.sign(grad), atol=1e-6)
    assert new_state.opt_step == 1


def test_train_step_does_not_mutate_input_state():
    learner = build_learner(TASKS["mlp-classify"], LearnerConfig(optimizer="momentum"))
    state = learner.init_state(5)
    before = state.copy()
    learner.train_step(state, learner.instance.draw_batch(5, 0))
    assert state.bitwise_equal(before)


def test_init_and_batches_are_seed_deterministic():
    task = TASKS["mlp-classify"]
    a = init_learner(task, LearnerConfig(), 9)
    b = init_learner(task, LearnerConfig(), 9)
    assert a.bitwise_equal(b)

    first = build_learner(task, LearnerConfig()).instance.draw_batch(9, 42)
    second = build_learner(task, LearnerConfig()).instance.draw_batch(9, 42)
    assert first.bitwise_equal(second)
    assert not first.bitwise_equal(build_learner(task, LearnerConfig()).instance.draw_batch(9, 43))


def test_policy_init_is_uniform():
    learner = build_learner(TASKS["bandit-policy"], LearnerConfig())
    state = learner.init_state(0)
    assert np.all(state.params == 0.0)
    assert learner.policy_entropy(state.params) == pytest.approx(np.log(4))


def test_divergence_marks_state_and_blocks_further_steps():
    task = Task(kind="quadratic", dim=3, batch_size=8, subbatches=2, noise_std=5.0)
    learner = build_learner(task, LearnerConfig(divergence_threshold=1e-3))
    state = learner.init_state(0)

    new_state, raw = learner.train_step(state, learner.instance.draw_batch(0, 0))

    assert raw.diverged and new_state.diverged
    assert raw.update_norm == 0.0
    assert np.array_equal(new_state.params, state.params)
    assert evaluate(learner, new_state, 0, floor=-42.0) == (-42.0, True)
    with pytest.raises(ContractViolationError):
        learner.train_step(new_state, learner.instance.draw_batch(0, 1))


def test_gradient_clipping_bounds_the_update():
    task = Task(kind="quadratic", dim=4, batch_size=8, subbatches=2, noise_std=10.0)
    learner = build_learner(task, LearnerConfig(lr=1.0, clip_grad_norm=0.01))
    _, raw = learner.train_step(learner.init_state(0), learner.instance.draw_batch(0, 0))
    assert raw.update_norm <= 0.01 + 1e-12


def test_incompatible_optimizer_is_rejected_with_key():
    with pytest.raises(ConfigurationError) as err:
        build_learner(TASKS["bandit-policy"], LearnerConfig(optimizer="momentum"))
    assert err.value.key == "learner.optimizer"


def test_entropy_bonus_requires_policy_task():
    with pytest.raises(ConfigurationError) as err:
        build_learner(TASKS["logistic"], LearnerConfig(entropy_coef=0.1))
    assert err.value.key == "learner.entropy_coef"


def test_learner_label():
    assert LearnerConfig(optimizer="adam", clip_grad_norm=1.0).label == "adam+clip1"
    assert LearnerConfig(entropy_coef=0.2).label == "sgd+ent0.2"


def _bandit(**changes):
    fields = dict(kind="bandit-policy", arms=3, arm_means=[1.0, 0.0, 0.0], reward_std=0.0,
                  batch_size=64, subbatches=4)
    fields.update(changes)
    return Task(**fields)


def test_uniform_policy_expected_reward():
    learner = build_learner(_bandit(), LearnerConfig())
    performance, diverged = evaluate(learner, learner.init_state(0), 0)
    assert performance == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert not diverged


def test_greedy_vertex_is_absorbing_only_without_entropy_bonus():
    greedy = np.array([20.0, 0.0, 0.0])
    batch = build_learner(_bandit(), LearnerConfig()).instance.draw_batch(0, 0)

    plain = build_learner(_bandit(), LearnerConfig(lr=1.0))
    state = plain.init_state(0)
    state.params = greedy.copy()
    new_state, raw = plain.train_step(state, batch)
    assert raw.update_norm == 0.0
    assert np.array_equal(new_state.params, greedy)

    regularized = build_learner(_bandit(), LearnerConfig(lr=1.0, entropy_coef=0.5))
    state = regularized.init_state(0)
    state.params = greedy.copy()
    new_state, raw = regularized.train_step(state, batch)
    assert new_state.params[0] < greedy[0]
    assert np.all(new_state.params[1:] > greedy[1:])
    assert regularized.policy_entropy(new_state.params) > regularized.policy_entropy(greedy)


def _entropy_after(entropy_coef, steps=2000):
    learner = build_learner(_bandit(), LearnerConfig(lr=1.0, entropy_coef=entropy_coef))
    state = learner.init_state(0)
    for step in range(steps):
        state, _ = learner.train_step(state, learner.instance.draw_batch(0, step))
    return learner.policy_entropy(state.params)


def test_entropy_bonus_keeps_policy_away_from_greedy_collapse():
    # 正則化目的の停留点は π ∝ exp(μ/c)、c=1 では H ≈ 0.98
    assert _entropy_after(1.0) > 0.6
    assert _entropy_after(0.0) < 0.25
