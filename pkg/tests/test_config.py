from pathlib import Path

import pytest

from src.utils import ConfigurationError
from src.utils.config import (
    apply_overrides,
    baseline_key,
    build_config,
    config_hash,
    dump_effective,
    load_config,
)

from conftest import MONITORED, make_raw


def test_load_yaml_with_defaults(write_config, small_raw):
    loaded = load_config(write_config(small_raw), env={})
    config = loaded.config
    assert config.task.kind == "quadratic"
    assert config.metrics.alpha == 0.1
    assert config.t_max == 120
    assert config.reference_step == 36
    assert loaded.seed_env is None
    assert len(loaded.hash) == 16


def test_overrides_are_parsed_as_yaml_scalars(small_raw):
    data = apply_overrides(small_raw, ["learner.lr=0.01", "perturbations.0.magnitude=0", "name=x"])
    assert data["learner"]["lr"] == 0.01
    assert data["perturbations"][0]["magnitude"] == 0
    assert data["name"] == "x"
    assert small_raw["learner"]["lr"] == 0.5


def test_bad_override_paths_name_the_key(small_raw):
    with pytest.raises(ConfigurationError) as err:
        apply_overrides(small_raw, ["perturbations.3.magnitude=1"])
    assert err.value.key == "perturbations.3.magnitude"
    with pytest.raises(ConfigurationError):
        apply_overrides(small_raw, ["learner.lr"])


def test_unknown_key_is_rejected_with_its_name(write_config, small_raw):
    with pytest.raises(ConfigurationError) as err:
        load_config(write_config(small_raw), overrides=["learner.bogus=1"], env={})
    assert err.value.key == "learner.bogus"


def test_seed_environment_overrides_seeds(write_config, small_raw):
    loaded = load_config(write_config(small_raw), env={"SB_SEED": "5,6"})
    assert loaded.config.seeds == [5, 6]
    assert loaded.seed_env == "5,6"
    with pytest.raises(ConfigurationError) as err:
        load_config(write_config(small_raw), env={"SB_SEED": "five"})
    assert err.value.key == "SB_SEED"


def test_seed_environment_from_process(monkeypatch, write_config, small_raw):
    monkeypatch.setenv("SB_SEED", "7")
    assert load_config(write_config(small_raw)).config.seeds == [7]


def test_duplicate_seeds_are_rejected():
    with pytest.raises(ConfigurationError) as err:
        build_config(make_raw(seeds=[1, 1]))
    assert err.value.key == "seeds"


def test_run_must_cover_two_baseline_windows():
    with pytest.raises(ConfigurationError):
        build_config(make_raw(total_steps=70))


def test_closed_loop_requires_monitor():
    with pytest.raises(ConfigurationError) as err:
        build_config(make_raw(closed_loop={"enabled": True}))
    assert err.value.key == "closed_loop.enabled"


def test_calibration_seeds_must_be_disjoint_from_audit_seeds():
    monitor = dict(MONITORED["monitor"], calibration_seeds=[0, 102, 103])
    with pytest.raises(ConfigurationError) as err:
        build_config(make_raw(monitor=monitor))
    assert err.value.key == "monitor.calibration_seeds"


def test_incompatible_perturbation_names_its_index():
    raw = make_raw(perturbations=[{"kind": "reward-noise"}])
    with pytest.raises(ConfigurationError) as err:
        build_config(raw)
    assert err.value.key == "perturbations.0.kind"


def test_hash_is_stable_and_sensitive(small_raw):
    first = build_config(small_raw)
    assert config_hash(first) == config_hash(build_config(make_raw()))
    assert config_hash(first) != config_hash(build_config(apply_overrides(small_raw, ["learner.lr=0.4"])))


def test_effective_config_reloads_to_same_hash(tmp_path, small_raw):
    config = build_config(small_raw)
    path = tmp_path / "effective.yaml"
    path.write_text(dump_effective(config), encoding="utf-8")
    assert load_config(path, env={}).hash == config_hash(config)


def test_baseline_key_ignores_perturbations(small_raw):
    config = build_config(small_raw)
    other = build_config(apply_overrides(small_raw, ["perturbations.0.start_frac=0.5"]))
    assert baseline_key(config, 0) == baseline_key(other, 0)
    assert baseline_key(config, 0) != baseline_key(config, 1)
    assert baseline_key(config, 0) != baseline_key(config, 0, monitor_id="abc")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.yaml", env={})


def test_example_configs_are_valid():
    examples = sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.yaml"))
    assert len(examples) == 4
    for path in examples:
        config = load_config(path, env={}).config
        assert config.perturbations
