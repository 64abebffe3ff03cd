"""
タスク定義とデータ生成
シード・ステップから決定的にバッチを生成する（𝒟_t の実体）
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


TaskKind = Literal["quadratic", "logistic", "mlp-classify", "bandit-policy"]

SUPERVISED_KINDS = frozenset({"quadratic", "logistic", "mlp-classify"})
LABELLED_KINDS = frozenset({"logistic", "mlp-classify"})
POLICY_KINDS = frozenset({"bandit-policy"})
ALL_KINDS = SUPERVISED_KINDS | POLICY_KINDS

# 乱数サブストリームID
STREAM_TASK = 0
STREAM_DATA = 1
STREAM_EVAL = 2
STREAM_INIT = 3
STREAM_MONITOR = 50
STREAM_PERTURB = 100

_MASK64 = (1 << 64) - 1


def stream_rng(*keys: int) -> np.random.Generator:
    """キー列から独立した乱数ストリームを生成"""
    return np.random.default_rng(np.random.SeedSequence([int(k) & _MASK64 for k in keys]))


class Task(BaseModel):
    """タスク仕様（data_spec + eval_spec）"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: TaskKind
    dim: int = Field(10, ge=1)
    classes: int = Field(4, ge=2)
    hidden: int = Field(16, ge=1)
    arms: int = Field(5, ge=2)
    arm_means: Optional[List[float]] = None
    label_noise: float = Field(0.0, ge=0.0, le=1.0)
    noise_std: float = Field(0.1, ge=0.0)
    cluster_std: float = Field(1.0, gt=0.0)
    class_sep: float = Field(1.0, gt=0.0)
    reward_std: float = Field(1.0, ge=0.0)
    curvature_min: float = Field(0.1, gt=0.0)
    curvature_max: float = Field(1.0, gt=0.0)
    batch_size: int = Field(64, ge=2)
    subbatches: int = Field(8, ge=2)
    eval_samples: int = Field(512, ge=1)
    eval_batch_size: int = Field(128, ge=1)
    task_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "Task":
        if self.curvature_min > self.curvature_max:
            raise ValueError("curvature_min must not exceed curvature_max")
        if self.subbatches > self.batch_size:
            raise ValueError("subbatches must not exceed batch_size")
        if self.arm_means is not None and len(self.arm_means) != self.arms:
            raise ValueError(f"arm_means has {len(self.arm_means)} entries but arms={self.arms}")
        return self

    @property
    def is_policy(self) -> bool:
        return self.kind in POLICY_KINDS

    @property
    def is_labelled(self) -> bool:
        return self.kind in LABELLED_KINDS

    @property
    def num_classes(self) -> int:
        """ラベルのクラス数（logisticは2値）"""
        return 2 if self.kind == "logistic" else self.classes


@dataclass(eq=False)
class Batch:
    """1ステップ分のデータ"""
    inputs: np.ndarray
    targets: np.ndarray
    splits: List[np.ndarray]
    logit_noise: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.splits) < 2:
            raise ValueError("a batch needs at least 2 sub-batches")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def copy(self) -> "Batch":
        return Batch(
            inputs=self.inputs.copy(),
            targets=self.targets.copy(),
            splits=[s.copy() for s in self.splits],
            logit_noise=None if self.logit_noise is None else self.logit_noise.copy(),
        )

    def bitwise_equal(self, other: "Batch") -> bool:
        """全フィールドのビット一致判定"""
        if self.inputs.tobytes() != other.inputs.tobytes():
            return False
        if self.targets.dtype != other.targets.dtype or self.targets.tobytes() != other.targets.tobytes():
            return False
        if (self.logit_noise is None) != (other.logit_noise is None):
            return False
        if self.logit_noise is not None and self.logit_noise.tobytes() != other.logit_noise.tobytes():
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.splits, other.splits))


def partition_indices(batch_size: int, parts: int) -> List[np.ndarray]:
    """バッチを連続したK個のサブバッチに分割"""
    return np.array_split(np.arange(batch_size), parts)


class TaskInstance:
    """task_seedで固定された問題インスタンス"""

    def __init__(self, task: Task):
        self.task = task
        rng = stream_rng(task.task_seed, STREAM_TASK)

        self.curvatures: Optional[np.ndarray] = None
        self.w_star: Optional[np.ndarray] = None
        self.centers: Optional[np.ndarray] = None
        self.arm_means: Optional[np.ndarray] = None

        if task.kind == "quadratic":
            self.curvatures = np.linspace(task.curvature_min, task.curvature_max, task.dim)
        elif task.kind == "logistic":
            self.w_star = rng.standard_normal(task.dim)
        elif task.kind == "mlp-classify":
            self.centers = rng.standard_normal((task.classes, task.dim)) * task.class_sep
        else:
            if task.arm_means is not None:
                self.arm_means = np.asarray(task.arm_means, dtype=np.float64)
            else:
                self.arm_means = rng.standard_normal(task.arms)

    def draw_batch(self, seed: int, step: int) -> Batch:
        """(seed, step) の純関数としてバッチを生成"""
        task = self.task
        rng = stream_rng(seed, STREAM_DATA, step)
        n = task.batch_size
        splits = partition_indices(n, task.subbatches)

        if task.kind == "quadratic":
            inputs = rng.standard_normal((n, task.dim)) * task.noise_std
            targets = np.zeros(n)
        elif task.kind == "logistic":
            inputs, targets = self._logistic_sample(rng, n, noisy=True)
        elif task.kind == "mlp-classify":
            inputs, targets = self._cluster_sample(rng, n, noisy=True)
        else:
            # 一様乱数（逆CDFによる行動選択用）と腕ごとの報酬表
            inputs = rng.random(n)
            targets = self.arm_means[None, :] + task.reward_std * rng.standard_normal((n, task.arms))

        return Batch(inputs=inputs, targets=targets, splits=splits)

    def eval_sample(self, eval_seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """評価用サンプル（ラベルノイズなし）"""
        task = self.task
        rng = stream_rng(task.task_seed, STREAM_EVAL, eval_seed)
        if task.kind == "logistic":
            return self._logistic_sample(rng, task.eval_samples, noisy=False)
        if task.kind == "mlp-classify":
            return self._cluster_sample(rng, task.eval_samples, noisy=False)
        raise ValueError(f"task kind {task.kind} has no sampled evaluation set")

    def _logistic_sample(self, rng: np.random.Generator, n: int, noisy: bool) -> Tuple[np.ndarray, np.ndarray]:
        x = rng.standard_normal((n, self.task.dim))
        y = (x @ self.w_star > 0.0).astype(np.float64)
        flips = rng.random(n) < self.task.label_noise
        if noisy:
            y = np.where(flips, 1.0 - y, y)
        return x, y

    def _cluster_sample(self, rng: np.random.Generator, n: int, noisy: bool) -> Tuple[np.ndarray, np.ndarray]:
        task = self.task
        y = rng.integers(0, task.classes, size=n)
        x = self.centers[y] + task.cluster_std * rng.standard_normal((n, task.dim))
        flips = rng.random(n) < task.label_noise
        replacement = rng.integers(0, task.classes, size=n)
        if noisy:
            y = np.where(flips, replacement, y)
        return x, y.astype(np.int64)
