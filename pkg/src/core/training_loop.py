"""
学習ループ
1ラン分の実行：バッチ生成→データ摂動→train_step→パラメータ摂動→評価→チャネル→潜在→閉ループ
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from .closed_loop import ClosedLoopEvaluation, ClosedLoopProbe
from ..analyzers.meta_state import MonitorModel, deviation_score, encode_step, normalize_telemetry
from ..analyzers.stability_metrics import RunMetrics, early_failure_metrics, summarize
from ..learners.checkpoint import serialize_state
from ..learners.learners import LearnerState, build_learner
from ..perturbations.injectors import PerturbationEngine
from ..perturbations.specs import PerturbationSpec
from ..telemetry.channels import ChannelTracker
from ..telemetry.records import TelemetryRecord, TelemetryStream, assemble_record
from ..utils.config import AuditConfig


RunKind = Literal["calibration", "baseline", "perturbed"]

# 発散時の性能フロア（注入前平均からのオフセット）
DIVERGENCE_OFFSET = 1e6


@dataclass
class RunPlan:
    """1ランの実行計画"""
    run_id: str
    seed: int
    kind: RunKind
    specs: List[PerturbationSpec] = field(default_factory=list)
    probe: bool = False

    @property
    def perturbation_label(self) -> str:
        if not self.specs:
            return "baseline"
        return "+".join(s.label for s in self.specs)


@dataclass(eq=False)
class RunResult:
    """1ランの実行結果"""
    plan: RunPlan
    t_s: int
    records: List[TelemetryRecord]
    latents: Optional[np.ndarray]
    scores: Optional[np.ndarray]
    evaluations: List[ClosedLoopEvaluation]
    checkpoints: Dict[int, bytes]
    final_state: LearnerState
    diverged_at: Optional[int] = None
    metrics: Optional[RunMetrics] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def activations(self) -> int:
        return sum(1 for e in self.evaluations if e.fired)

    def column(self, name: str) -> List:
        return [r.to_dict()[name] for r in self.records]


def run_plan_id(kind: RunKind, seed: int, index: Optional[int] = None,
                spec: Optional[PerturbationSpec] = None) -> str:
    if kind == "perturbed" and spec is not None:
        return f"p{index}_{spec.kind}_s{seed}"
    if kind == "calibration":
        return f"calibration_s{seed}"
    return f"baseline_s{seed}"


def injection_point(config: AuditConfig, plan: RunPlan, engine: PerturbationEngine) -> int:
    """メトリクス基準ステップ（摂動ランは最初の注入ステップ）"""
    steps = engine.injection_steps()
    return min(steps) if steps else config.reference_step


def execute_run(config: AuditConfig,
                plan: RunPlan,
                monitor: Optional[MonitorModel] = None,
                config_hash: str = "") -> RunResult:
    """1ラン分を同期実行（ワーカースレッドで呼ばれる）"""
    learner = build_learner(config.task, config.learner)
    state = learner.init_state(plan.seed)
    engine = PerturbationEngine(plan.specs, config.total_steps, plan.seed, learner)
    t_s = injection_point(config, plan, engine)

    params = config.metrics
    tracker = ChannelTracker(params.window, params.alpha, params.decay, params.coherence)
    stream = TelemetryStream()
    probe = ClosedLoopProbe(config.closed_loop) if plan.probe and monitor is not None else None

    latents: List[np.ndarray] = []
    scores: List[float] = []
    checkpoints: Dict[int, bytes] = {}
    h = np.zeros(monitor.latent_dim) if monitor is not None else None
    pre_sum = 0.0
    pre_count = 0
    last_perf: Optional[float] = None
    diverged_at: Optional[int] = None
    every = config.output.checkpoint_every

    for step in range(config.total_steps):
        batch = learner.instance.draw_batch(plan.seed, step)
        batch = engine.apply_data(batch, step)
        hooks = engine.hooks(step, probe.lr_scale if probe is not None else 1.0)
        state, raw = learner.train_step(state, batch,
                                        grad_transform=hooks.grad_transform,
                                        param_transform=hooks.param_transform,
                                        subgrad_transform=hooks.subgrad_transform)
        if not raw.diverged:
            state = engine.apply_parametric(state, step)

        floor = (pre_sum / pre_count if pre_count else 0.0) - DIVERGENCE_OFFSET
        if state.diverged or last_perf is None or step % config.learner.eval_every == 0:
            evaluation = learner.evaluate(state, config.eval_seed, floor)
            perf = evaluation.performance
            if evaluation.diverged and not state.diverged:
                state.diverged = True
        else:
            perf = last_perf
        last_perf = perf
        if step < t_s:
            pre_sum += perf
            pre_count += 1

        channels = tracker.update(perf, raw.update_norm, grads=raw.subbatch_grads)
        raw.diverged = raw.diverged or state.diverged
        record = assemble_record(step, raw, perf, channels, engine.is_active(step), stream.last_step)
        stream.append(record)

        if monitor is not None:
            h = encode_step(monitor, h, normalize_telemetry(record, monitor.norm_stats))
            latents.append(h)
            score = deviation_score(monitor, h, step)
            scores.append(score)
            if probe is not None:
                probe.observe(step, score)

        if every and (step + 1) % every == 0:
            checkpoints[step] = serialize_state(state)

        if state.diverged:
            diverged_at = step
            break

    checkpoints[stream.last_step] = serialize_state(state)

    result = RunResult(
        plan=plan,
        t_s=t_s,
        records=stream.records,
        latents=np.vstack(latents) if latents else None,
        scores=np.asarray(scores) if scores else None,
        evaluations=probe.evaluations if probe is not None else [],
        checkpoints=checkpoints,
        final_state=state,
        diverged_at=diverged_at,
    )
    result.metrics = summarize_run(config, result, config_hash)
    return result


def summarize_records(config: AuditConfig,
                      records: Sequence[TelemetryRecord],
                      t_s: int,
                      latents: Optional[np.ndarray],
                      scores: Optional[np.ndarray],
                      activations: int,
                      *,
                      run_id: str,
                      seed: int,
                      perturbation: str,
                      config_hash: str) -> RunMetrics:
    """テレメトリ列からメトリクスを計算（実行時と再生時で共通）"""
    diverged = bool(records) and records[-1].diverged
    ids = dict(run_id=run_id, config_hash=config_hash, seed=seed,
               learner=config.learner.label, perturbation=perturbation)
    if diverged and len(records) <= t_s:
        # 注入前に発散したランは崩壊扱い
        return early_failure_metrics(len(records), records[-1].step, t_s, activations=activations, **ids)
    return summarize(
        perf=[r.performance for r in records],
        inst=[r.x_inst for r in records],
        x_grad=[r.x_grad for r in records],
        diverged=diverged,
        t_s=t_s,
        params=config.metrics,
        latent=latents,
        scores=scores,
        kappa=config.closed_loop.kappa,
        activations=activations,
        **ids,
    )


def summarize_run(config: AuditConfig, result: RunResult, config_hash: str) -> RunMetrics:
    """RunResultからメトリクスを計算"""
    return summarize_records(
        config, result.records, result.t_s, result.latents, result.scores, result.activations,
        run_id=result.plan.run_id,
        seed=result.plan.seed,
        perturbation=result.plan.perturbation_label,
        config_hash=config_hash,
    )
