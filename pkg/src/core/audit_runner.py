"""
監査ランナー
較正→モニター学習→ベースライン→摂動ラン→メトリクス集約→成果物出力 の統括とタイミングスイープ
"""

import asyncio
import hashlib
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from .closed_loop import ClosedLoopEvaluation
from .job_queue import JobProcessor, JobQueue, RunJob
from .training_loop import RunPlan, RunResult, execute_run, run_plan_id
from ..analyzers.meta_state import MonitorModel, fit_monitor, restore_model, serialize_model
from ..analyzers.stability_metrics import AuditReport, aggregate
from ..exporters.artifact_writer import (
    CHECKPOINT_DIR,
    ArtifactWriter,
    load_run_artifact,
)
from ..exporters.report_exporter import ReportExporter
from ..learners.checkpoint import restore_state
from ..perturbations.specs import DEFAULT_SWEEP_FRACS, injection_step
from ..utils.config import (
    AuditConfig,
    LoadedConfig,
    baseline_key,
    build_config,
    config_hash as compute_config_hash,
    dump_effective,
)
from ..utils.errors import ArtifactIOError, ConfigurationError
from ..utils.logger import AuditLogger, ErrorHandler, ProcessStep, ProgressTracker


MONITOR_FILE = "monitor.sbmm"
MONITOR_SUMMARY_FILE = "monitor.json"
EFFECTIVE_CONFIG_FILE = "config.effective.yaml"
PROGRESS_FILE = "progress.json"
RUNS_DIR = "runs"
CALIBRATION_DIR = "calibration"
BASELINE_CACHE_DIR = "baseline_cache"

ProgressCallback = Callable[[RunJob], None]


def monitor_id(monitor: Optional[MonitorModel]) -> Optional[str]:
    if monitor is None:
        return None
    return hashlib.sha256(serialize_model(monitor)).hexdigest()[:16]


def fresh_directory(root: Path, suffix: str) -> Path:
    """タイムスタンプ付きの新規ディレクトリ（既存とは衝突させない）"""
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    candidate = root / f"{stamp}_{suffix}"
    counter = 1
    while candidate.exists():
        candidate = root / f"{stamp}_{suffix}_{counter}"
        counter += 1
    candidate.mkdir(parents=True)
    return candidate


def load_monitor(ref: str) -> MonitorModel:
    """モニター参照（monitor.sbmm または それを含む成果物ディレクトリ）"""
    path = Path(ref)
    if path.is_dir():
        path = path / MONITOR_FILE
    if not path.exists():
        raise ConfigurationError(f"monitor file not found: {path}", key="monitor.ref")
    return restore_model(path.read_bytes())


def _checkpoint_step(path: Path) -> int:
    match = re.search(r"(\d+)", path.stem)
    return int(match.group(1)) if match else -1


class BaselineCache:
    """ベースラインランの共有キャッシュ（メモリ + 任意でディスク）"""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else None
        self.entries: Dict[str, RunResult] = {}

    def get(self, key: str, plan: RunPlan) -> Optional[RunResult]:
        if key in self.entries:
            return self.entries[key]
        if self.directory is None or not (self.directory / key).exists():
            return None
        artifact = load_run_artifact(self.directory / key)
        checkpoints = {_checkpoint_step(p): p.read_bytes() for p in artifact.checkpoints}
        last = artifact.records[-1] if artifact.records else None
        result = RunResult(
            plan=plan,
            t_s=int(artifact.header["t_s"]),
            records=artifact.records,
            latents=artifact.latents,
            scores=None,
            evaluations=[ClosedLoopEvaluation(**e) for e in artifact.evaluations],
            checkpoints=checkpoints,
            final_state=restore_state(checkpoints[max(checkpoints)]),
            diverged_at=last.step if last is not None and last.diverged else None,
            metrics=artifact.metrics,
        )
        self.entries[key] = result
        return result

    async def put(self, key: str, result: RunResult, config_hash: str, header_fields: Dict[str, Any]):
        self.entries[key] = result
        if self.directory is None or (self.directory / key).exists():
            return
        writer = ArtifactWriter(self.directory)
        await writer.write_run(
            self.directory / key,
            config_hash=config_hash,
            header_fields=header_fields,
            records=result.records,
            metrics=result.metrics,
            latents=result.latents,
            evaluations=result.evaluations if result.plan.probe else None,
            checkpoints=result.checkpoints,
        )


@dataclass
class AuditResult:
    """監査1回分の結果"""
    artifact_dir: Path
    config: AuditConfig
    config_hash: str
    report: AuditReport
    runs: Dict[str, RunResult]
    monitor: Optional[MonitorModel]
    executed_runs: int
    cached_runs: int
    manifest_path: Path
    calibration_runs: List[str] = field(default_factory=list)

    def telemetry_files(self) -> List[Path]:
        return sorted((self.artifact_dir / RUNS_DIR).glob("*/telemetry.jsonl"))


class AuditRunner:
    """ベースライン・摂動ランの実行と成果物出力を統括"""

    def __init__(self,
                 config: Union[AuditConfig, LoadedConfig],
                 output_dir: Optional[Path] = None,
                 jobs: int = 1,
                 logger: Optional[AuditLogger] = None,
                 baseline_cache: Optional[BaselineCache] = None,
                 monitor: Optional[MonitorModel] = None,
                 use_disk_cache: bool = True,
                 progress_callback: Optional[ProgressCallback] = None):
        if isinstance(config, LoadedConfig):
            self.config = config.config
            self.seed_env = config.seed_env
        else:
            self.config = config
            self.seed_env = None
        self.config_hash = compute_config_hash(self.config)
        self.output_root = Path(output_dir or self.config.output.directory)
        self.jobs = max(1, jobs)
        self.logger = logger
        if baseline_cache is None:
            cache_dir = self.output_root / BASELINE_CACHE_DIR if use_disk_cache else None
            baseline_cache = BaselineCache(cache_dir)
        self.baseline_cache = baseline_cache
        self.monitor = monitor
        self.progress_callback = progress_callback
        self.executed_runs = 0
        self.cached_runs = 0

    def plans(self) -> List[RunPlan]:
        """シードごとにベースライン1本 + 摂動スペックごとに1本"""
        probe = self.config.closed_loop.enabled and self.config.monitor.enabled
        plans: List[RunPlan] = []
        for seed in self.config.seeds:
            plans.append(RunPlan(run_plan_id("baseline", seed), seed, "baseline", probe=probe))
            for index, spec in enumerate(self.config.perturbations):
                plans.append(RunPlan(run_plan_id("perturbed", seed, index, spec), seed, "perturbed",
                                     specs=[spec], probe=probe))
        return plans

    def calibration_plans(self) -> List[RunPlan]:
        return [RunPlan(run_plan_id("calibration", seed), seed, "calibration")
                for seed in self.config.monitor.calibration_seeds]

    def header_fields(self, result: RunResult) -> Dict[str, Any]:
        return {
            "run_id": result.plan.run_id,
            "kind": result.plan.kind,
            "seed": result.plan.seed,
            "perturbation": result.plan.perturbation_label,
            "t_s": result.t_s,
            "total_steps": self.config.total_steps,
            "probe": result.plan.probe,
            "sb_seed": self.seed_env,
        }

    async def run(self) -> AuditResult:
        """監査を実行し成果物ディレクトリを返す"""
        artifact_dir = fresh_directory(self.output_root, self.config_hash[:8])
        writer = ArtifactWriter(artifact_dir)
        logger = self.logger or AuditLogger(artifact_dir / "logs")
        error_handler = ErrorHandler(logger)
        tracker = ProgressTracker(logger)
        exporter = ReportExporter(writer)
        run_ids: List[str] = []
        failed_runs: List[str] = []

        try:
            await writer.write_text(artifact_dir / EFFECTIVE_CONFIG_FILE, dump_effective(self.config))
            plans = self.plans()
            tracker.start_session(len(plans), {"config_hash": self.config_hash, "name": self.config.name})

            monitor, calibration_ids = await self._prepare_monitor(writer, logger, tracker)
            queue = JobQueue(progress_file=artifact_dir / PROGRESS_FILE)
            by_id = {plan.run_id: plan for plan in plans}
            for plan in plans:
                queue.add_job(plan.run_id, plan.kind, plan.seed)

            async def process(job: RunJob) -> Optional[RunResult]:
                plan = by_id[job.run_id]
                step = ProcessStep.BASELINE if plan.kind == "baseline" else ProcessStep.PERTURBED
                tracker.start_step(step, plan.run_id)
                try:
                    result = await self._execute(plan, monitor, job)
                except Exception as e:
                    outcome = error_handler.handle_run_error(step, plan.run_id, e)
                    if outcome["abort_audit"]:
                        raise
                    # 数値エラーのランだけ除外して続行
                    failed_runs.append(plan.run_id)
                    tracker.end_step(step, plan.run_id, success=False, details={"error": str(e)})
                    return None
                if result.diverged:
                    error_handler.handle_divergence(step, plan.run_id, result.diverged_at)
                await writer.write_run(
                    artifact_dir / RUNS_DIR / plan.run_id,
                    config_hash=self.config_hash,
                    header_fields=self.header_fields(result),
                    records=result.records,
                    metrics=result.metrics,
                    latents=result.latents,
                    evaluations=result.evaluations if plan.probe else None,
                    checkpoints=result.checkpoints,
                    latents_csv=self.config.output.latents_csv,
                )
                run_ids.append(plan.run_id)
                tracker.end_step(step, plan.run_id, details={
                    "diverged": result.diverged,
                    "collapse_time": result.metrics.collapse_time,
                    "activations": result.activations,
                    "cached": job.cached,
                })
                if self.progress_callback is not None:
                    self.progress_callback(job)
                return result

            results = await JobProcessor(self.jobs).process_jobs(queue, process)
            queue.export_results_csv(artifact_dir / "jobs.csv")

            tracker.start_step(ProcessStep.METRICS, "audit")
            report = aggregate([r.metrics for r in results.values()], t_max=self.config.t_max)
            tracker.end_step(ProcessStep.METRICS, "audit", details={"cells": len(report.cells)})

            tracker.start_step(ProcessStep.EXPORT, "audit")
            await exporter.export_report(report, self.config.name)
            manifest_path = await writer.write_manifest(
                self.config_hash, "complete", run_ids,
                name=self.config.name,
                calibration_runs=calibration_ids,
                monitor=MONITOR_FILE if monitor is not None else None,
                sb_seed=self.seed_env,
                failed_runs=sorted(failed_runs),
            )
            tracker.end_step(ProcessStep.EXPORT, "audit")
            tracker.end_session(len(results) + len(failed_runs), len(results))
            await logger.save_json_logs()
        except Exception as e:
            error_handler.handle_run_error(ProcessStep.COMPLETE, "audit", e)
            manifest_path = await self._write_partial(writer, run_ids, e)
            await logger.save_json_logs()
            if isinstance(e, (OSError, ArtifactIOError)):
                raise ArtifactIOError(f"audit aborted on I/O failure: {e}", manifest_path=manifest_path) from e
            raise

        return AuditResult(
            artifact_dir=artifact_dir,
            config=self.config,
            config_hash=self.config_hash,
            report=report,
            runs=results,
            monitor=monitor,
            executed_runs=self.executed_runs,
            cached_runs=self.cached_runs,
            manifest_path=manifest_path,
            calibration_runs=calibration_ids,
        )

    async def _write_partial(self, writer: ArtifactWriter, run_ids: List[str], error: Exception) -> Optional[Path]:
        try:
            return await writer.write_manifest(self.config_hash, "partial", run_ids, error=str(error))
        except OSError:
            return None

    async def _execute(self, plan: RunPlan, monitor: Optional[MonitorModel], job: RunJob) -> RunResult:
        """ベースラインはキャッシュ優先、それ以外はワーカースレッドで実行"""
        key = None
        if plan.kind == "baseline":
            key = baseline_key(self.config, plan.seed, monitor_id(monitor))
            cached = self.baseline_cache.get(key, plan)
            if cached is not None:
                self.cached_runs += 1
                job.cached = True
                return replace(cached, plan=plan,
                               metrics=replace(cached.metrics, config_hash=self.config_hash))

        result = await asyncio.to_thread(execute_run, self.config, plan, monitor, self.config_hash)
        self.executed_runs += 1
        if key is not None:
            await self.baseline_cache.put(key, result, self.config_hash, self.header_fields(result))
        return result

    async def _prepare_monitor(self, writer: ArtifactWriter, logger: AuditLogger,
                               tracker: ProgressTracker):
        """モニターの用意（共有・参照ロード・較正ランからの学習）"""
        settings = self.config.monitor
        if not settings.enabled:
            return None, []

        calibration_ids: List[str] = []
        monitor = self.monitor
        if monitor is None and settings.ref != "fit-fresh":
            monitor = load_monitor(settings.ref)
            logger.info(ProcessStep.MONITOR_FIT, "monitor", "Loaded monitor", details={"ref": settings.ref})
        elif monitor is None:
            queue = JobQueue()
            plans = {plan.run_id: plan for plan in self.calibration_plans()}
            for plan in plans.values():
                queue.add_job(plan.run_id, plan.kind, plan.seed)

            async def calibrate(job: RunJob) -> RunResult:
                tracker.start_step(ProcessStep.CALIBRATION, job.run_id)
                result = await asyncio.to_thread(execute_run, self.config, plans[job.run_id], None,
                                                 self.config_hash)
                self.executed_runs += 1
                await writer.write_run(
                    writer.root / CALIBRATION_DIR / job.run_id,
                    config_hash=self.config_hash,
                    header_fields=self.header_fields(result),
                    records=result.records,
                    metrics=result.metrics,
                )
                tracker.end_step(ProcessStep.CALIBRATION, job.run_id, details={"diverged": result.diverged})
                return result

            calibrated = await JobProcessor(self.jobs).process_jobs(queue, calibrate)
            calibration_ids = sorted(calibrated)
            tracker.start_step(ProcessStep.MONITOR_FIT, "monitor")
            monitor = await asyncio.to_thread(
                fit_monitor, [calibrated[run_id].records for run_id in calibration_ids], settings
            )
            tracker.end_step(ProcessStep.MONITOR_FIT, "monitor", details={
                "final_loss": monitor.final_loss,
                "best_epoch": monitor.best_epoch,
                "score_scale": monitor.score_scale,
                "spectral_radius": monitor.spectral_radius,
            })
            self.monitor = monitor

        await writer.write_bytes(writer.root / MONITOR_FILE, serialize_model(monitor))
        await writer.write_json(writer.root / MONITOR_SUMMARY_FILE, monitor.summary())
        return monitor, calibration_ids


@dataclass
class SweepResult:
    """タイミングスイープ結果"""
    sweep_dir: Path
    rows: List[Dict[str, Any]]
    audits: List[AuditResult]
    executed_runs: int

    @property
    def perturbed_runs(self) -> int:
        return sum(1 for audit in self.audits for r in audit.runs.values() if r.plan.kind == "perturbed")


def sweep_configs(config: AuditConfig, fracs: Sequence[float]) -> List[AuditConfig]:
    """スペックテンプレートをstart_fracごとに複製"""
    if len(config.perturbations) != 1:
        raise ConfigurationError(
            f"timing sweep needs exactly one perturbation template, got {len(config.perturbations)}",
            key="perturbations",
        )
    fracs = sorted(set(float(f) for f in fracs))
    if not fracs:
        raise ConfigurationError("timing sweep needs at least one start fraction", key="fracs")
    configs = []
    raw = config.model_dump(mode="json")
    for frac in fracs:
        raw["perturbations"][0]["start_frac"] = frac
        configs.append(build_config(raw))
    return configs


async def timing_sweep(config: Union[AuditConfig, LoadedConfig],
                       fracs: Sequence[float] = DEFAULT_SWEEP_FRACS,
                       output_dir: Optional[Path] = None,
                       jobs: int = 1,
                       logger: Optional[AuditLogger] = None,
                       use_disk_cache: bool = True,
                       progress_callback: Optional[ProgressCallback] = None) -> SweepResult:
    """注入時刻を変えながら監査を繰り返す（モニターとベースラインは共有）"""
    base = config.config if isinstance(config, LoadedConfig) else config
    seed_env = config.seed_env if isinstance(config, LoadedConfig) else None
    configs = sweep_configs(base, fracs)
    root = Path(output_dir or base.output.directory)
    sweep_dir = fresh_directory(root, f"sweep_{compute_config_hash(base)[:8]}")
    writer = ArtifactWriter(sweep_dir)
    logger = logger or AuditLogger(sweep_dir / "logs")
    cache = BaselineCache(root / BASELINE_CACHE_DIR if use_disk_cache else None)

    audits: List[AuditResult] = []
    rows: List[Dict[str, Any]] = []
    monitor: Optional[MonitorModel] = None
    executed = 0
    for cfg in configs:
        spec = cfg.perturbations[0]
        logger.info(ProcessStep.SWEEP, "sweep", "Running sweep point", details={"start_frac": spec.start_frac})
        loaded = LoadedConfig(config=cfg, source=None, seed_env=seed_env, overrides=[])
        runner = AuditRunner(loaded, output_dir=sweep_dir, jobs=jobs, logger=logger,
                             baseline_cache=cache, monitor=monitor, progress_callback=progress_callback)
        audit = await runner.run()
        monitor = audit.monitor
        executed += audit.executed_runs
        audits.append(audit)

        perturbed = [c for c in audit.report.cells if c.perturbation != "baseline"]
        cell = perturbed[0]
        rt = cell.stats["recovery_time"]
        rows.append({
            "start_frac": spec.start_frac,
            "t_s": injection_step(spec.start_frac, cfg.total_steps),
            "n_runs": cell.n_runs,
            "p_div": cell.p_div,
            "rt_mean": rt["mean"],
            "rt_se": rt["se"],
            "config_hash": audit.config_hash,
            "artifact_dir": audit.artifact_dir.name,
        })

    await ReportExporter(writer).export_sweep(rows, base.perturbations[0].label)
    await logger.save_json_logs()
    return SweepResult(sweep_dir=sweep_dir, rows=sorted(rows, key=lambda r: r["start_frac"]),
                       audits=audits, executed_runs=executed)
