"""
再生検証
記録済みの生カラムからチャネル・潜在・閉ループ判定・メトリクスを再計算し保存値と照合
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import yaml

from .audit_runner import EFFECTIVE_CONFIG_FILE, MONITOR_FILE, RUNS_DIR
from .closed_loop import simulate_probe
from .training_loop import summarize_records
from ..analyzers.meta_state import MonitorModel, channel_matrix, deviation_score, encode_stream, restore_model
from ..analyzers.stability_metrics import AuditReport, RunMetrics, aggregate
from ..exporters.artifact_writer import (
    LATENTS_FILE,
    METRICS_FILE,
    TELEMETRY_FILE,
    RunArtifact,
    load_run_artifact,
    read_manifest,
)
from ..telemetry.channels import recompute_channels
from ..telemetry.records import TelemetryRecord, TelemetryStream
from ..utils.config import AuditConfig, build_config, config_hash as compute_config_hash
from ..utils.errors import ArtifactIOError, TamperError
from ..utils.logger import AuditLogger, ProcessStep


def same_value(a: Any, b: Any) -> bool:
    """NaNを等しいとみなす厳密比較"""
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(same_value(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(same_value(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


@dataclass
class RunReplay:
    """1ラン分の再計算結果"""
    run_id: str
    metrics: RunMetrics
    activations: int
    mismatches: List[str] = field(default_factory=list)


@dataclass
class ReplayReport:
    """再生検証レポート"""
    artifact_dir: Path
    config_hash: str
    runs: List[RunReplay]
    report: AuditReport
    mismatches: List[str] = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return not self.mismatches

    @property
    def metrics(self) -> List[RunMetrics]:
        return [r.metrics for r in self.runs]


def load_effective_config(artifact_dir: Path) -> AuditConfig:
    """成果物ディレクトリの実効設定（環境変数は適用しない）"""
    path = Path(artifact_dir) / EFFECTIVE_CONFIG_FILE
    if not path.exists():
        raise ArtifactIOError(f"no {EFFECTIVE_CONFIG_FILE} in {artifact_dir}")
    return build_config(yaml.safe_load(path.read_text(encoding="utf-8")))


def _check_hashes(artifact: RunArtifact, expected: str):
    run_id = artifact.run_dir.name
    if artifact.run_id != run_id:
        raise TamperError(f"run directory {run_id} holds telemetry for {artifact.run_id}",
                          field=f"{run_id}/{TELEMETRY_FILE}:run_id")
    if artifact.config_hash != expected:
        raise TamperError(f"telemetry of {run_id} was written under config {artifact.config_hash}",
                          field=f"{run_id}/{TELEMETRY_FILE}:config_hash")
    if artifact.metrics.config_hash != expected:
        raise TamperError(f"metrics of {run_id} were computed under config {artifact.metrics.config_hash}",
                          field=f"{run_id}/{METRICS_FILE}:config_hash")
    if artifact.latents_hash is not None and artifact.latents_hash != expected:
        raise TamperError(f"latents of {run_id} were written under config {artifact.latents_hash}",
                          field=f"{run_id}/{LATENTS_FILE}:config_hash")


def replay_run(config: AuditConfig, artifact: RunArtifact, monitor: Optional[MonitorModel],
               config_hash: str) -> RunReplay:
    """1ラン分を再計算して照合"""
    run_id = artifact.run_dir.name
    mismatches: List[str] = []
    stream = TelemetryStream()
    for record in artifact.records:
        stream.append(record)

    params = config.metrics
    channels = recompute_channels(
        stream.column("J"), stream.column("update_norm"), stream.column("x_grad"),
        window=params.window, alpha=params.alpha, decay=params.decay,
    )
    rebuilt: List[TelemetryRecord] = []
    for record, state in zip(artifact.records, channels):
        for name in ("x_gen", "x_inst", "x_mem"):
            if not same_value(getattr(record, name), getattr(state, name)):
                mismatches.append(f"{run_id}: channel {name} differs at step {record.step}")
                break
        rebuilt.append(replace(record, x_gen=state.x_gen, x_inst=state.x_inst, x_mem=state.x_mem))

    latents, scores = None, None
    if monitor is not None and rebuilt:
        latents = encode_stream(monitor, channel_matrix(rebuilt))
        scores = np.asarray([deviation_score(monitor, h, record.step)
                             for record, h in zip(rebuilt, latents)])
        if artifact.latents is None or artifact.latents.tobytes() != latents.tobytes():
            mismatches.append(f"{run_id}: latent trajectory differs")

    activations = 0
    if artifact.header.get("probe") and scores is not None:
        probe = simulate_probe(scores, config.closed_loop)
        activations = len(probe.actions)
        if not same_value([asdict(e) for e in probe.evaluations], artifact.evaluations):
            mismatches.append(f"{run_id}: closed-loop log differs")

    metrics = summarize_records(
        config, rebuilt, int(artifact.header["t_s"]), latents, scores, activations,
        run_id=artifact.run_id,
        seed=int(artifact.header["seed"]),
        perturbation=artifact.header["perturbation"],
        config_hash=config_hash,
    )
    stored = artifact.metrics.to_dict()
    for key, value in metrics.to_dict().items():
        if not same_value(value, stored.get(key)):
            mismatches.append(f"{run_id}: metric {key} recomputed {value!r}, stored {stored.get(key)!r}")
    return RunReplay(run_id=run_id, metrics=metrics, activations=activations, mismatches=mismatches)


def replay(artifact_dir: Path, logger: Optional[AuditLogger] = None) -> ReplayReport:
    """成果物ディレクトリ全体の再生検証"""
    artifact_dir = Path(artifact_dir)
    manifest = read_manifest(artifact_dir)
    if manifest.get("status") != "complete":
        raise ArtifactIOError(f"artifact {artifact_dir} is partial: {manifest.get('error')}",
                              manifest_path=artifact_dir / "manifest.json")

    config = load_effective_config(artifact_dir)
    config_hash = compute_config_hash(config)
    if manifest.get("config_hash") != config_hash:
        raise TamperError(f"effective config hashes to {config_hash}, manifest records {manifest.get('config_hash')}",
                          field="config_hash")

    monitor = None
    if manifest.get("monitor"):
        monitor = restore_model((artifact_dir / manifest["monitor"]).read_bytes())

    runs: List[RunReplay] = []
    for run_id in sorted(manifest["runs"]):
        artifact = load_run_artifact(artifact_dir / RUNS_DIR / run_id)
        _check_hashes(artifact, config_hash)
        result = replay_run(config, artifact, monitor, config_hash)
        if logger is not None:
            logger.info(ProcessStep.REPLAY, run_id, "Run replayed",
                        details={"verified": not result.mismatches, "mismatches": len(result.mismatches)})
        runs.append(result)

    mismatches = [m for r in runs for m in r.mismatches]
    report = aggregate([r.metrics for r in runs], t_max=config.t_max)
    report_path = artifact_dir / "report.json"
    if report_path.exists():
        stored = json.loads(report_path.read_text(encoding="utf-8"))
        if stored.get("header", {}).get("config_hash") != config_hash:
            raise TamperError("report.json was written under another config", field="report.json:config_hash")
        if not same_value(report.to_dict(), stored.get("report")):
            mismatches.append("report.json: aggregated report differs from recomputation")
    else:
        mismatches.append("report.json: missing")

    return ReplayReport(artifact_dir=artifact_dir, config_hash=config_hash, runs=runs,
                        report=report, mismatches=mismatches)
