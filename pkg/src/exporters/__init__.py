"""
Exporters module for Stability Audit
"""

from .artifact_writer import ArtifactWriter, RunArtifact, load_run_artifact, read_manifest
from .report_exporter import ReportExporter, ReportTemplate, report_frame, sweep_frame, trajectory_frame, compare_frame

__all__ = [
    'ArtifactWriter', 'RunArtifact', 'load_run_artifact', 'read_manifest',
    'ReportExporter', 'ReportTemplate', 'report_frame', 'sweep_frame', 'trajectory_frame', 'compare_frame',
]
