"""
Telemetry module for Stability Audit
"""

from .channels import (
    ChannelState,
    ChannelTracker,
    gradient_coherence,
    instability_index,
    performance_trend,
    state_persistence,
    recompute_channels,
)
from .records import TelemetryRecord, TelemetryStream, assemble_record, TELEMETRY_FIELDS

__all__ = [
    'ChannelState', 'ChannelTracker', 'gradient_coherence', 'instability_index',
    'performance_trend', 'state_persistence', 'recompute_channels',
    'TelemetryRecord', 'TelemetryStream', 'assemble_record', 'TELEMETRY_FIELDS',
]
