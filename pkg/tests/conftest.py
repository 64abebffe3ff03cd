"""
テスト共通フィクスチャ
"""

import copy
from pathlib import Path

import pytest
import yaml


SMALL_AUDIT = {
    "name": "small",
    "task": {
        "kind": "quadratic",
        "dim": 4,
        "batch_size": 16,
        "subbatches": 4,
        "noise_std": 0.1,
        "curvature_min": 0.5,
        "curvature_max": 1.0,
    },
    "learner": {"optimizer": "sgd", "lr": 0.5},
    "total_steps": 120,
    "seeds": [0, 1],
    "perturbations": [
        {"kind": "lr-spike", "magnitude": 10.0, "start_frac": 0.3, "duration": 5},
    ],
    "metrics": {
        "window": 10,
        "delta": 20,
        "horizon": 50,
        "baseline_window": 40,
        "precollapse_window": 40,
        "sustain": 5,
    },
    "monitor": {"enabled": False},
}

MONITORED = {
    "monitor": {
        "enabled": True,
        "latent_dim": 4,
        "epochs": 2,
        "bptt_window": 16,
        "min_steps": 100,
        "calibration_seeds": [101, 102, 103],
    },
    "closed_loop": {"enabled": True, "kappa": 3.0, "consecutive": 3},
}


def make_raw(**changes):
    """SMALL_AUDITのコピーにトップレベルの変更を適用"""
    raw = copy.deepcopy(SMALL_AUDIT)
    for key, value in changes.items():
        raw[key] = copy.deepcopy(value)
    return raw


@pytest.fixture
def small_raw():
    return make_raw()


@pytest.fixture
def monitored_raw():
    return make_raw(**MONITORED)


@pytest.fixture
def write_config(tmp_path):
    """辞書をYAML設定ファイルとして書き出す"""
    def _write(raw, name="audit.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(raw, sort_keys=False), encoding="utf-8")
        return path
    return _write


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("SB_SEED", raising=False)
