"""
Learners module for Stability Audit
"""

from .tasks import Task, TaskInstance, Batch, partition_indices, stream_rng
from .optimizers import Optimizer, SGD, Momentum, Adam, build_optimizer, first_moment_key
from .learners import (
    LearnerConfig,
    LearnerState,
    StepRaw,
    Evaluation,
    MicroLearner,
    build_learner,
    check_compatibility,
    init_learner,
    train_step,
    evaluate,
    DIVERGED_FLOOR,
)
from .checkpoint import serialize_state, restore_state

__all__ = [
    'Task', 'TaskInstance', 'Batch', 'partition_indices', 'stream_rng',
    'Optimizer', 'SGD', 'Momentum', 'Adam', 'build_optimizer', 'first_moment_key',
    'LearnerConfig', 'LearnerState', 'StepRaw', 'Evaluation', 'MicroLearner',
    'build_learner', 'check_compatibility', 'init_learner', 'train_step', 'evaluate',
    'DIVERGED_FLOOR', 'serialize_state', 'restore_state',
]
