"""
Core module for Stability Audit
"""

from .job_queue import JobQueue, JobProcessor, RunJob, JobStatus
from .closed_loop import ClosedLoopProbe, ClosedLoopAction, ClosedLoopEvaluation, StreakState, closed_loop_step
from .training_loop import RunPlan, RunResult, execute_run, summarize_records
from .audit_runner import AuditRunner, AuditResult, BaselineCache, SweepResult, timing_sweep
from .replay import ReplayReport, replay

__all__ = [
    'JobQueue', 'JobProcessor', 'RunJob', 'JobStatus',
    'ClosedLoopProbe', 'ClosedLoopAction', 'ClosedLoopEvaluation', 'StreakState', 'closed_loop_step',
    'RunPlan', 'RunResult', 'execute_run', 'summarize_records',
    'AuditRunner', 'AuditResult', 'BaselineCache', 'SweepResult', 'timing_sweep',
    'ReplayReport', 'replay',
]
