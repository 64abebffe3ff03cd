import asyncio
from pathlib import Path

import numpy as np
import pytest

from src.core import AuditRunner
from src.utils.config import build_config, load_config

from conftest import make_raw


CONFIGS = Path(__file__).resolve().parent.parent / "configs"
NO_MONITOR = ("monitor.enabled=false", "closed_loop.enabled=false")


def _shipped(name, root, *overrides):
    """同梱設定をオーバーライド付きで監査"""
    loaded = load_config(CONFIGS / name, overrides=list(overrides), env={})
    return asyncio.run(AuditRunner(loaded.config, output_dir=root, jobs=4, use_disk_cache=False).run())


@pytest.mark.slow
def test_clipping_separates_divergence_under_sign_flip(tmp_path):
    plain = _shipped("mlp_sign_flip.yaml", tmp_path / "plain", *NO_MONITOR)
    clipped = _shipped("mlp_sign_flip.yaml", tmp_path / "clipped", *NO_MONITOR, "learner.clip_grad_norm=1.0")

    flip = "grad-sign-flip@0.3x1"
    unclipped_p = plain.report.cell("sgd", flip).p_div
    clipped_p = clipped.report.cell("sgd+clip1", flip).p_div
    assert unclipped_p >= 0.6
    assert clipped_p <= 0.2
    assert unclipped_p - clipped_p >= 0.4


@pytest.mark.slow
def test_entropy_bonus_lowers_divergence_under_reward_noise(tmp_path):
    regularised = _shipped("bandit_reward_noise.yaml", tmp_path / "ent", "monitor.enabled=false")
    greedy = _shipped("bandit_reward_noise.yaml", tmp_path / "greedy", "monitor.enabled=false",
                      "learner.entropy_coef=0")

    noise = "reward-noise@0.3x0.5"
    gap = greedy.report.cell("sgd", noise).p_div - regularised.report.cell("sgd+ent0.2", noise).p_div
    assert gap >= 0.4


@pytest.fixture(scope="module")
def monitored_flip(tmp_path_factory):
    return _shipped("mlp_sign_flip.yaml", tmp_path_factory.mktemp("monitored"), "seeds=[0, 1, 2, 3, 4]")


def _split(result):
    baselines = [run for run in result.runs.values() if run.plan.kind == "baseline"]
    perturbed = [run for run in result.runs.values() if run.plan.kind == "perturbed"]
    return baselines, perturbed


@pytest.mark.slow
def test_closed_loop_is_quiet_on_baselines_and_fires_under_sign_flip(monitored_flip):
    baselines, perturbed = _split(monitored_flip)
    assert len(baselines) == len(perturbed) == 5
    assert [run.activations for run in baselines] == [0] * 5
    assert sum(1 for run in perturbed if run.activations >= 1) / len(perturbed) >= 0.8


@pytest.mark.slow
def test_held_out_baselines_stay_inside_calibrated_band(monitored_flip):
    baselines, _ = _split(monitored_flip)
    scores = np.concatenate([run.scores for run in baselines])
    assert np.mean(scores <= 3.0) >= 0.99


@pytest.mark.slow
def test_collapsing_runs_deviate_further_than_baselines(monitored_flip):
    baselines, perturbed = _split(monitored_flip)
    collapsing = [run.metrics for run in perturbed if run.metrics.collapse_time is not None]
    assert collapsing
    assert all(m.first_alarm_step is not None for m in collapsing)
    baseline_msd = np.mean([run.metrics.meta_state_deviation for run in baselines])
    assert np.mean([m.meta_state_deviation for m in collapsing]) > baseline_msd
    assert monitored_flip.report.group("collapse").alarm_before_collapse_fraction is not None


def test_subbatch_sign_flip_breaks_gradient_coherence(tmp_path):
    raw = make_raw(perturbations=[{"kind": "grad-sign-flip", "magnitude": 0.5, "granularity": "subbatch",
                                   "start_frac": 0.3, "duration": 10}])
    raw["task"].update(batch_size=32, subbatches=8)
    raw["learner"]["lr"] = 0.01
    result = asyncio.run(AuditRunner(build_config(raw), output_dir=tmp_path, use_disk_cache=False).run())

    for seed in (0, 1):
        assert result.runs[f"baseline_s{seed}"].metrics.xgrad_drop_ratio >= 0.8
        assert result.runs[f"p0_grad-sign-flip_s{seed}"].metrics.xgrad_drop_ratio <= 0.5
