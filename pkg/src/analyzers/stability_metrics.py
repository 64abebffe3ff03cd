"""
安定性メトリクス
崩壊時刻・発散確率・回復率・回復時間・スパイク強度・メタ状態偏差と、ラン横断の集約
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..utils.errors import ContractViolationError, MetricUndefinedError


SIP_EPS = 1e-12
DEGENERATE_SIGMA_EPS = 1e-9


class MetricParams(BaseModel):
    """メトリクス・チャネルのパラメータ"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    window: int = Field(50, ge=1)
    alpha: float = Field(0.1, gt=0.0, le=1.0)
    decay: float = Field(0.99, ge=0.0, lt=1.0)
    coherence: Literal["pairwise", "to-mean"] = "pairwise"
    delta: int = Field(100, ge=1)
    horizon: int = Field(500, ge=1)
    baseline_window: int = Field(200, ge=2)
    t_max: Optional[int] = Field(None, ge=1)
    sustain: int = Field(10, ge=1)
    reference_frac: float = Field(0.3, gt=0.0, lt=1.0)
    precollapse_window: int = Field(200, ge=1)
    xgrad_post_steps: int = Field(5, ge=1)


@dataclass(frozen=True)
class BaselineStats:
    j_pre: float
    sigma_pre: float
    window_len: int


@dataclass(frozen=True)
class RecoveryTime:
    value: float
    recovered: bool


@dataclass(frozen=True)
class SpikeIntensity:
    value: float
    raw_max: float
    baseline_mean: float
    baseline_quiet: bool


@dataclass(frozen=True)
class LatentDeviation:
    value: float
    truncated: bool


def baseline_stats(perf: Sequence[float], t_s: int, window: int = 200) -> BaselineStats:
    """注入前ウィンドウの平均・母標準偏差"""
    start = max(0, t_s - window)
    segment = np.asarray(perf[start:t_s], dtype=np.float64)
    if segment.shape[0] < 2:
        raise MetricUndefinedError(f"baseline needs at least 2 pre-injection steps, got {segment.shape[0]}")
    return BaselineStats(float(np.mean(segment)), float(np.std(segment)), int(segment.shape[0]))


def collapse_threshold(base: BaselineStats) -> float:
    """J_pre − 2σ_pre（σ_pre=0 のときは相対εで代替）"""
    if base.sigma_pre > 0.0:
        return base.j_pre - 2.0 * base.sigma_pre
    return base.j_pre - 2.0 * DEGENERATE_SIGMA_EPS * max(1.0, abs(base.j_pre))


def _tail_runs(mask: np.ndarray) -> np.ndarray:
    """各位置から末尾方向に連続するTrueの長さ"""
    runs = np.zeros(mask.shape[0] + 1, dtype=np.int64)
    for i in range(mask.shape[0] - 1, -1, -1):
        runs[i] = runs[i + 1] + 1 if mask[i] else 0
    return runs[:-1]


def collapse_time(perf: Sequence[float], t_s: int, base: BaselineStats,
                  delta: int = 100, diverged: bool = False) -> Optional[int]:
    """崩壊時刻 T_c"""
    values = np.asarray(perf, dtype=np.float64)
    n = values.shape[0]
    below = values < collapse_threshold(base)
    runs = _tail_runs(below)
    for t in range(t_s, n):
        if runs[t] >= delta:
            return t
        # 発散ランは確認窓が足りなくても末尾まで閾値未満なら崩壊扱い
        if diverged and runs[t] == n - t:
            return t
    return None


def divergence_probability(collapse_times: Sequence[Optional[int]], t_max: int) -> float:
    """T_c < t_max/2 となるシードの割合"""
    if len(collapse_times) == 0:
        raise MetricUndefinedError("divergence probability needs at least one run")
    early = sum(1 for t in collapse_times if t is not None and t < t_max / 2)
    return early / len(collapse_times)


def recovery_rate(perf: Sequence[float], t_s: int, base: BaselineStats,
                  delta: int = 100, diverged: bool = False) -> float:
    """回復率 R_rec（崩壊しなかったランのみ）"""
    if collapse_time(perf, t_s, base, delta, diverged) is not None:
        raise MetricUndefinedError("recovery rate is undefined for a collapsed run")
    values = np.asarray(perf, dtype=np.float64)
    post = values[t_s:]
    if post.shape[0] == 0:
        raise MetricUndefinedError("no steps after injection")
    j_min = float(post[int(np.argmin(post))])
    j_end = float(values[-1])
    denom = base.j_pre - j_min
    if denom < DEGENERATE_SIGMA_EPS * max(1.0, abs(base.j_pre)):
        return 1.0
    return (j_end - j_min) / denom


def recovery_time(perf: Sequence[float], t_s: int, base: BaselineStats, sustain: int = 10) -> RecoveryTime:
    """回復時間 RT（帯域外に出なければ −1.0）"""
    values = np.asarray(perf, dtype=np.float64)
    n = values.shape[0]
    in_band = values >= collapse_threshold(base)

    exits = np.flatnonzero(~in_band[t_s:])
    if exits.shape[0] == 0:
        return RecoveryTime(-1.0, True)
    first_exit = t_s + int(exits[0])

    runs = _tail_runs(in_band)
    for t in range(first_exit + 1, n):
        if runs[t] >= sustain:
            return RecoveryTime(float(t - t_s), True)
    return RecoveryTime(float(n - t_s), False)


def spike_intensity(inst: Sequence[float], t_s: int, horizon: int = 500,
                    baseline_window: int = 200) -> SpikeIntensity:
    """スパイク強度（注入後の x_inst 最大値 ÷ 注入前平均）"""
    values = np.asarray(inst, dtype=np.float64)
    post = values[t_s:min(t_s + horizon + 1, values.shape[0])]
    pre = values[max(0, t_s - baseline_window):t_s]
    if post.shape[0] == 0 or pre.shape[0] == 0:
        raise MetricUndefinedError("spike intensity needs steps on both sides of the injection")
    raw_max = float(np.max(post))
    base_mean = float(np.mean(pre))
    quiet = base_mean < SIP_EPS
    if quiet and raw_max < SIP_EPS:
        return SpikeIntensity(1.0, raw_max, base_mean, True)
    return SpikeIntensity(raw_max / max(base_mean, SIP_EPS), raw_max, base_mean, quiet)


def meta_state_deviation(latent: np.ndarray, t_s: int, horizon: int = 500) -> LatentDeviation:
    """D_meta = max_{t∈[t_s, t_s+T]} ‖h_t − h_{t_s}‖₂"""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or t_s >= latent.shape[0] or t_s < 0:
        raise MetricUndefinedError(f"latent trajectory has no entry at step {t_s}")
    last = min(t_s + horizon, latent.shape[0] - 1)
    window = latent[t_s:last + 1] - latent[t_s]
    return LatentDeviation(float(np.max(np.linalg.norm(window, axis=1))), t_s + horizon > latent.shape[0] - 1)


def first_alarm_step(scores: Sequence[float], t_s: int, kappa: float) -> Optional[int]:
    """注入後に偏差スコアが初めて κ を超えたステップ"""
    values = np.asarray(scores, dtype=np.float64)
    hits = np.flatnonzero(values[t_s:] > kappa)
    return t_s + int(hits[0]) if hits.shape[0] else None


def xgrad_drop_ratio(x_grad: Sequence[float], t_s: int, post_steps: int = 5,
                     baseline_window: int = 200) -> Optional[float]:
    """注入直後の x_grad 平均 ÷ 注入前平均"""
    values = np.asarray(x_grad, dtype=np.float64)
    pre = values[max(0, t_s - baseline_window):t_s]
    post = values[t_s:t_s + post_steps]
    if pre.shape[0] == 0 or post.shape[0] == 0:
        return None
    pre_mean = float(np.mean(pre))
    if pre_mean == 0.0:
        return None
    return float(np.mean(post)) / pre_mean


def precollapse_window(t_s: int, end: int, length: int) -> Tuple[int, int]:
    """崩壊点（またはラン終端）で終わる固定長ウィンドウ"""
    return max(t_s, end - length), end


@dataclass
class RunMetrics:
    """ラン単位のメトリクス"""
    run_id: str
    config_hash: str
    seed: int
    learner: str
    perturbation: str
    t_s: int
    total_steps: int
    collapse_time: Optional[int]
    instability_peak: float
    recovery_rate: Optional[float]
    recovery_time: float
    recovered: bool
    spike_intensity: float
    spike_raw_max: float
    baseline_quiet: bool
    meta_state_deviation: Optional[float]
    msd_truncated: bool
    diverged: bool
    j_pre: float
    sigma_pre: float
    precollapse_msd: Optional[float] = None
    precollapse_sip: Optional[float] = None
    first_alarm_step: Optional[int] = None
    xgrad_drop_ratio: Optional[float] = None
    activations: int = 0

    @property
    def collapsed(self) -> bool:
        return self.collapse_time is not None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunMetrics":
        return cls(**data)


def summarize(perf: Sequence[float],
              inst: Sequence[float],
              x_grad: Sequence[float],
              diverged: bool,
              t_s: int,
              params: MetricParams,
              latent: Optional[np.ndarray] = None,
              scores: Optional[Sequence[float]] = None,
              kappa: Optional[float] = None,
              *,
              run_id: str,
              config_hash: str,
              seed: int,
              learner: str,
              perturbation: str,
              activations: int = 0) -> RunMetrics:
    """1ラン分のテレメトリ（+潜在軌跡）からメトリクス一式を計算"""
    n = len(perf)
    base = baseline_stats(perf, t_s, params.baseline_window)
    t_c = collapse_time(perf, t_s, base, params.delta, diverged)
    r_rec = None if t_c is not None else recovery_rate(perf, t_s, base, params.delta, diverged)
    rt = recovery_time(perf, t_s, base, params.sustain)
    sip = spike_intensity(inst, t_s, params.horizon, params.baseline_window)
    inst_peak = float(np.max(np.asarray(inst[t_s:], dtype=np.float64)))

    end = t_c if t_c is not None else n - 1
    w_start, w_end = precollapse_window(t_s, end, params.precollapse_window)
    inst_arr = np.asarray(inst, dtype=np.float64)
    pre_sip = float(np.max(inst_arr[w_start:w_end + 1])) / max(sip.baseline_mean, SIP_EPS)

    msd = None
    truncated = False
    pre_msd = None
    if latent is not None:
        dev = meta_state_deviation(latent, t_s, params.horizon)
        msd, truncated = dev.value, dev.truncated
        window = np.asarray(latent[w_start:w_end + 1], dtype=np.float64) - np.asarray(latent[t_s])
        pre_msd = float(np.max(np.linalg.norm(window, axis=1)))

    alarm = None
    if scores is not None and kappa is not None:
        alarm = first_alarm_step(scores, t_s, kappa)

    return RunMetrics(
        run_id=run_id,
        config_hash=config_hash,
        seed=seed,
        learner=learner,
        perturbation=perturbation,
        t_s=t_s,
        total_steps=n,
        collapse_time=t_c,
        instability_peak=inst_peak,
        recovery_rate=r_rec,
        recovery_time=rt.value,
        recovered=rt.recovered,
        spike_intensity=sip.value,
        spike_raw_max=sip.raw_max,
        baseline_quiet=sip.baseline_quiet,
        meta_state_deviation=msd,
        msd_truncated=truncated,
        diverged=diverged,
        j_pre=base.j_pre,
        sigma_pre=base.sigma_pre,
        precollapse_msd=pre_msd,
        precollapse_sip=pre_sip,
        first_alarm_step=alarm,
        xgrad_drop_ratio=xgrad_drop_ratio(x_grad, t_s, params.xgrad_post_steps, params.baseline_window),
        activations=activations,
    )


def early_failure_metrics(n: int, diverged_step: int, t_s: int, *,
                          run_id: str, config_hash: str, seed: int,
                          learner: str, perturbation: str, activations: int = 0) -> RunMetrics:
    """注入点までに発散したランのメトリクス（発散ステップを崩壊時刻とする）"""
    return RunMetrics(
        run_id=run_id,
        config_hash=config_hash,
        seed=seed,
        learner=learner,
        perturbation=perturbation,
        t_s=t_s,
        total_steps=n,
        collapse_time=diverged_step,
        instability_peak=0.0,
        recovery_rate=None,
        recovery_time=0.0,
        recovered=False,
        spike_intensity=0.0,
        spike_raw_max=0.0,
        baseline_quiet=True,
        meta_state_deviation=None,
        msd_truncated=True,
        diverged=True,
        j_pre=0.0,
        sigma_pre=0.0,
        activations=activations,
    )


def _mean_se(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float], int]:
    """平均と標準誤差（ddof=1）"""
    data = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if data.shape[0] == 0:
        return None, None, 0
    mean = float(np.mean(data))
    if data.shape[0] == 1 or np.all(data == data[0]):
        return mean, 0.0, int(data.shape[0])
    return mean, float(np.std(data, ddof=1) / np.sqrt(data.shape[0])), int(data.shape[0])


@dataclass
class CellSummary:
    """(学習器, 摂動) セルの集約"""
    learner: str
    perturbation: str
    n_runs: int
    p_div: float
    n_collapsed: int
    stats: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)


@dataclass
class GroupSummary:
    """崩壊群/非崩壊群の集約（崩壊前固定ウィンドウ）"""
    group: str
    n_runs: int
    precollapse_msd_mean: Optional[float]
    precollapse_sip_mean: Optional[float]
    xgrad_drop_ratio_mean: Optional[float]
    alarm_before_collapse_fraction: Optional[float] = None


@dataclass
class AuditReport:
    """監査レポート"""
    config_hash: str
    t_max: int
    runs: List[RunMetrics]
    cells: List[CellSummary]
    groups: List[GroupSummary]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "t_max": self.t_max,
            "runs": [r.to_dict() for r in self.runs],
            "cells": [asdict(c) for c in self.cells],
            "groups": [asdict(g) for g in self.groups],
        }

    def cell(self, learner: str, perturbation: str) -> CellSummary:
        for c in self.cells:
            if c.learner == learner and c.perturbation == perturbation:
                return c
        raise KeyError((learner, perturbation))

    def group(self, name: str) -> GroupSummary:
        for g in self.groups:
            if g.group == name:
                return g
        raise KeyError(name)


CELL_METRICS = ("collapse_time", "recovery_time", "recovery_rate", "spike_intensity", "meta_state_deviation")


def group_summaries(runs: Sequence[RunMetrics]) -> List[GroupSummary]:
    """崩壊/非崩壊の群統計"""
    out = []
    for name, members in (("collapse", [r for r in runs if r.collapsed]),
                          ("non-collapse", [r for r in runs if not r.collapsed])):
        alarm_fraction = None
        # モニターなしの監査では算出しない
        if name == "collapse" and members and any(r.meta_state_deviation is not None for r in members):
            early = sum(1 for r in members
                        if r.first_alarm_step is not None and r.first_alarm_step < r.collapse_time)
            alarm_fraction = early / len(members)
        out.append(GroupSummary(
            group=name,
            n_runs=len(members),
            precollapse_msd_mean=_mean_se([r.precollapse_msd for r in members])[0],
            precollapse_sip_mean=_mean_se([r.precollapse_sip for r in members])[0],
            xgrad_drop_ratio_mean=_mean_se([r.xgrad_drop_ratio for r in members])[0],
            alarm_before_collapse_fraction=alarm_fraction,
        ))
    return out


def aggregate(runs: Sequence[RunMetrics], t_max: Optional[int] = None, check_hash: bool = True) -> AuditReport:
    """ラン横断の集約"""
    if not runs:
        raise MetricUndefinedError("cannot aggregate an empty run list")
    hashes = sorted({r.config_hash for r in runs})
    if check_hash and len(hashes) > 1:
        raise ContractViolationError(f"aggregate over mixed configs: {', '.join(hashes)}")
    ordered = sorted(runs, key=lambda r: r.run_id)
    t_max = t_max if t_max is not None else max(r.total_steps for r in ordered)

    cells: List[CellSummary] = []
    keys = sorted({(r.learner, r.perturbation) for r in ordered})
    for learner, perturbation in keys:
        members = [r for r in ordered if r.learner == learner and r.perturbation == perturbation]
        stats = {}
        for name in CELL_METRICS:
            mean, se, count = _mean_se([getattr(r, name) for r in members])
            stats[name] = {"mean": mean, "se": se, "n": count}
        cells.append(CellSummary(
            learner=learner,
            perturbation=perturbation,
            n_runs=len(members),
            p_div=divergence_probability([r.collapse_time for r in members], t_max),
            n_collapsed=sum(1 for r in members if r.collapsed),
            stats=stats,
        ))

    return AuditReport(
        config_hash=hashes[0] if len(hashes) == 1 else "mixed",
        t_max=t_max,
        runs=ordered,
        cells=cells,
        groups=group_summaries(ordered),
    )
