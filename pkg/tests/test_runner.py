import asyncio
import json

import numpy as np
import pandas as pd
import pytest
import yaml

from src.core import AuditRunner, replay, timing_sweep
from src.core.audit_runner import sweep_configs
from src.utils import ArtifactIOError, ConfigurationError, TamperError
from src.utils.config import build_config

from conftest import make_raw


def _audit(raw, root, **kwargs):
    kwargs.setdefault("use_disk_cache", False)
    return asyncio.run(AuditRunner(build_config(raw), output_dir=root, **kwargs).run())


def _data_lines(path):
    """ヘッダ行（作成日時を含む）を除いたテレメトリ行"""
    return path.read_text(encoding="utf-8").splitlines()[1:]


def _telemetry(result, run_id):
    return result.artifact_dir / "runs" / run_id / "telemetry.jsonl"


def test_audit_writes_one_telemetry_file_per_run(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)

    assert len(result.telemetry_files()) == 4
    assert result.executed_runs == 4 and result.cached_runs == 0
    manifest = json.loads(result.manifest_path.read_text(encoding="utf-8"))
    assert manifest["status"] == "complete"
    assert manifest["runs"] == ["baseline_s0", "baseline_s1", "p0_lr-spike_s0", "p0_lr-spike_s1"]
    assert {c.perturbation for c in result.report.cells} == {"baseline", "lr-spike@0.3x10"}
    for name in ("report.json", "report.csv", "report.md", "jobs.csv", "config.effective.yaml"):
        assert (result.artifact_dir / name).exists()
    assert len(_data_lines(_telemetry(result, "baseline_s0"))) == 120
    assert not (result.artifact_dir / "runs" / "baseline_s0" / "latents.csv").exists()


def test_runs_are_deterministic_across_job_counts(tmp_path, small_raw):
    serial = _audit(small_raw, tmp_path / "serial", jobs=1)
    parallel = _audit(small_raw, tmp_path / "parallel", jobs=3)

    assert serial.config_hash == parallel.config_hash
    for run_id in serial.runs:
        assert _data_lines(_telemetry(serial, run_id)) == _data_lines(_telemetry(parallel, run_id))
        left = json.loads((serial.artifact_dir / "runs" / run_id / "metrics.json").read_text())["metrics"]
        right = json.loads((parallel.artifact_dir / "runs" / run_id / "metrics.json").read_text())["metrics"]
        assert left == right


def test_zero_magnitude_perturbation_matches_baseline(tmp_path):
    raw = make_raw(perturbations=[{"kind": "lr-spike", "magnitude": 0.0, "start_frac": 0.3, "duration": 5}])
    result = _audit(raw, tmp_path)
    for seed in (0, 1):
        assert (_data_lines(_telemetry(result, f"p0_lr-spike_s{seed}"))
                == _data_lines(_telemetry(result, f"baseline_s{seed}")))


def test_stable_baseline_has_no_collapse(tmp_path):
    raw = make_raw()
    raw["task"]["noise_std"] = 0.0
    result = _audit(raw, tmp_path)
    baseline = result.runs["baseline_s0"].metrics
    assert baseline.collapse_time is None
    assert baseline.recovery_time == -1.0


def test_diverging_run_is_flagged_and_counted(tmp_path):
    raw = make_raw(perturbations=[{"kind": "lr-spike", "magnitude": 10.0, "start_frac": 0.3, "duration": 40}])
    result = _audit(raw, tmp_path)

    run = result.runs["p0_lr-spike_s0"]
    assert run.diverged and run.metrics.diverged
    assert run.metrics.collapse_time is not None
    assert json.loads(_data_lines(_telemetry(result, "p0_lr-spike_s0"))[-1])["diverged"] is True
    assert result.report.cell("sgd", "lr-spike@0.3x10").p_div == 1.0
    assert replay(result.artifact_dir).verified


def test_replay_verifies_untouched_artifacts(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)
    report = replay(result.artifact_dir)
    assert report.verified, report.mismatches
    assert report.config_hash == result.config_hash
    assert [m.to_dict() for m in report.metrics] == [result.runs[r.run_id].metrics.to_dict()
                                                     for r in report.runs]


def test_replay_detects_edited_performance(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)
    path = _telemetry(result, "p0_lr-spike_s1")
    lines = path.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[50])
    record["J"] = record["J"] - 1.0
    lines[50] = json.dumps(record, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    report = replay(result.artifact_dir)
    assert not report.verified
    assert any(m.startswith("p0_lr-spike_s1") for m in report.mismatches)


def test_replay_rejects_foreign_telemetry_header(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)
    path = _telemetry(result, "baseline_s0")
    lines = path.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    header["config_hash"] = "0" * 16
    lines[0] = json.dumps(header, separators=(",", ":"), sort_keys=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    with pytest.raises(TamperError) as err:
        replay(result.artifact_dir)
    assert err.value.field == "baseline_s0/telemetry.jsonl:config_hash"


def test_replay_rejects_edited_effective_config(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)
    path = result.artifact_dir / "config.effective.yaml"
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    data["learner"]["lr"] = 0.4
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")

    with pytest.raises(TamperError) as err:
        replay(result.artifact_dir)
    assert err.value.field == "config_hash"


def test_replay_refuses_partial_artifacts(tmp_path, small_raw):
    result = _audit(small_raw, tmp_path)
    manifest = json.loads(result.manifest_path.read_text(encoding="utf-8"))
    manifest["status"] = "partial"
    result.manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(ArtifactIOError):
        replay(result.artifact_dir)


def _failing_execute(monkeypatch, run_id, error):
    """指定ランだけ例外を送出するexecute_runに差し替え"""
    from src.core import audit_runner

    original = audit_runner.execute_run

    def _execute(config, plan, monitor, config_hash):
        if plan.run_id == run_id:
            raise error
        return original(config, plan, monitor, config_hash)

    monkeypatch.setattr(audit_runner, "execute_run", _execute)


def test_numerical_run_failure_is_skipped(tmp_path, small_raw, monkeypatch):
    _failing_execute(monkeypatch, "p0_lr-spike_s1", FloatingPointError("overflow in matmul"))
    result = _audit(small_raw, tmp_path)

    manifest = json.loads(result.manifest_path.read_text(encoding="utf-8"))
    assert manifest["status"] == "complete"
    assert manifest["failed_runs"] == ["p0_lr-spike_s1"]
    assert "p0_lr-spike_s1" not in manifest["runs"]
    assert set(result.runs) == {"baseline_s0", "baseline_s1", "p0_lr-spike_s0"}
    assert result.report.cell("sgd", "lr-spike@0.3x10").n_runs == 1


def test_aborting_run_failure_writes_partial_manifest(tmp_path, small_raw, monkeypatch):
    _failing_execute(monkeypatch, "p0_lr-spike_s1", RuntimeError("worker crashed"))
    with pytest.raises(RuntimeError, match="worker crashed"):
        _audit(small_raw, tmp_path)

    manifests = list(tmp_path.glob("*/manifest.json"))
    assert len(manifests) == 1
    manifest = json.loads(manifests[0].read_text(encoding="utf-8"))
    assert manifest["status"] == "partial"
    assert "worker crashed" in manifest["error"]


@pytest.mark.slow
def test_monitored_audit_with_closed_loop(tmp_path, monitored_raw):
    monitored_raw["output"] = {"latents_csv": True}
    result = _audit(monitored_raw, tmp_path)

    assert result.executed_runs == 3 + 4
    assert result.calibration_runs == ["calibration_s101", "calibration_s102", "calibration_s103"]
    assert len(result.telemetry_files()) == 4
    assert (result.artifact_dir / "monitor.sbmm").exists()
    run_dir = result.artifact_dir / "runs" / "p0_lr-spike_s0"
    assert (run_dir / "latents.sblt").exists()
    table = pd.read_csv(run_dir / "latents.csv")
    assert list(table.columns) == ["step", "h0", "h1", "h2", "h3"]
    assert table["step"].tolist() == list(range(120))
    np.testing.assert_allclose(table[["h0", "h1", "h2", "h3"]].to_numpy(),
                               result.runs["p0_lr-spike_s0"].latents, rtol=1e-12, atol=1e-15)
    assert len((run_dir / "closed_loop.jsonl").read_text(encoding="utf-8").splitlines()) == 1 + 120
    assert result.runs["p0_lr-spike_s0"].metrics.meta_state_deviation is not None

    report = replay(result.artifact_dir)
    assert report.verified, report.mismatches


def test_disk_cache_reuses_baselines(tmp_path, small_raw):
    first = _audit(small_raw, tmp_path, use_disk_cache=True)
    second = _audit(small_raw, tmp_path, use_disk_cache=True)

    assert first.artifact_dir != second.artifact_dir
    assert second.executed_runs == 2 and second.cached_runs == 2
    assert (_data_lines(_telemetry(first, "baseline_s1"))
            == _data_lines(_telemetry(second, "baseline_s1")))
    assert replay(second.artifact_dir).verified


def test_timing_sweep_shares_baselines(tmp_path, small_raw):
    result = asyncio.run(timing_sweep(build_config(small_raw), [0.5, 0.3], output_dir=tmp_path,
                                      use_disk_cache=False))

    assert [row["start_frac"] for row in result.rows] == [0.3, 0.5]
    assert [row["t_s"] for row in result.rows] == [36, 60]
    assert result.perturbed_runs == 4
    assert result.executed_runs == 2 + 4
    assert result.audits[1].cached_runs == 2
    assert (result.sweep_dir / "sweep.csv").exists()
    assert replay(result.audits[1].artifact_dir).verified


def test_sweep_needs_a_single_template(small_raw):
    raw = make_raw(perturbations=small_raw["perturbations"] * 2)
    with pytest.raises(ConfigurationError) as err:
        sweep_configs(build_config(raw), [0.3])
    assert err.value.key == "perturbations"
