"""
Perturbations module for Stability Audit
"""

from .specs import (
    PerturbationSpec,
    ActiveWindow,
    KindInfo,
    KIND_CATALOG,
    DEFAULT_SWEEP_FRACS,
    injection_step,
    resolve_schedule,
    validate_specs,
)
from .injectors import (
    PerturbationEngine,
    StepHooks,
    apply_optimization,
    apply_data,
    apply_parametric,
    apply_signal,
    smooth_labels,
)

__all__ = [
    'PerturbationSpec', 'ActiveWindow', 'KindInfo', 'KIND_CATALOG', 'DEFAULT_SWEEP_FRACS',
    'injection_step', 'resolve_schedule', 'validate_specs',
    'PerturbationEngine', 'StepHooks', 'apply_optimization', 'apply_data',
    'apply_parametric', 'apply_signal', 'smooth_labels',
]
