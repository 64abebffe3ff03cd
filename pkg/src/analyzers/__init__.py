"""
Analyzers module for Stability Audit
"""

from .stability_metrics import (
    MetricParams,
    BaselineStats,
    RecoveryTime,
    SpikeIntensity,
    LatentDeviation,
    RunMetrics,
    CellSummary,
    GroupSummary,
    AuditReport,
    baseline_stats,
    collapse_threshold,
    collapse_time,
    divergence_probability,
    recovery_rate,
    recovery_time,
    spike_intensity,
    meta_state_deviation,
    first_alarm_step,
    xgrad_drop_ratio,
    summarize,
    aggregate,
)
from .meta_state import (
    MonitorConfig,
    MonitorModel,
    NormStats,
    MONITOR_CHANNELS,
    encode_step,
    encode_stream,
    deviation_score,
    deviation_scores,
    reference_latent,
    fit_monitor,
    monitor_loss_and_grads,
    normalize_telemetry,
    serialize_model,
    restore_model,
    serialize_latents,
    restore_latents,
)

__all__ = [
    'MetricParams', 'BaselineStats', 'RecoveryTime', 'SpikeIntensity', 'LatentDeviation',
    'RunMetrics', 'CellSummary', 'GroupSummary', 'AuditReport',
    'baseline_stats', 'collapse_threshold', 'collapse_time', 'divergence_probability',
    'recovery_rate', 'recovery_time', 'spike_intensity', 'meta_state_deviation',
    'first_alarm_step', 'xgrad_drop_ratio', 'summarize', 'aggregate',
    'MonitorConfig', 'MonitorModel', 'NormStats', 'MONITOR_CHANNELS',
    'encode_step', 'encode_stream', 'deviation_score', 'deviation_scores', 'reference_latent', 'fit_monitor',
    'monitor_loss_and_grads', 'normalize_telemetry',
    'serialize_model', 'restore_model', 'serialize_latents', 'restore_latents',
]
