"""
Utils module for Stability Audit
"""

from .errors import (
    StabilityAuditError,
    ConfigurationError,
    ContractViolationError,
    CheckpointCorruptionError,
    MetricUndefinedError,
    MonitorTrainingError,
    TamperError,
    ArtifactIOError,
)
from .logger import AuditLogger, ErrorHandler, ProgressTracker, LogLevel, ProcessStep

# 設定モジュールは学習器・摂動を参照するため src.utils.config から直接importする

__all__ = [
    'StabilityAuditError', 'ConfigurationError', 'ContractViolationError',
    'CheckpointCorruptionError', 'MetricUndefinedError', 'MonitorTrainingError',
    'TamperError', 'ArtifactIOError',
    'AuditLogger', 'ErrorHandler', 'ProgressTracker', 'LogLevel', 'ProcessStep',
]
