"""
マイクロ学習器
学習器の実装：二次関数・ロジスティック回帰・1隠れ層MLP・softmax方策勾配
勾配はすべて解析的な逆伝播で計算する
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .optimizers import build_optimizer
from .tasks import STREAM_INIT, Batch, Task, TaskInstance, stream_rng
from ..utils.errors import ConfigurationError, ContractViolationError


# 発散時の性能フロア（ランナーが事前平均からのオフセットとして上書きする）
DIVERGED_FLOOR = -1e6

OptimizerKind = Literal["sgd", "momentum", "adam"]

OPTIMIZER_SUPPORT: Dict[str, Tuple[str, ...]] = {
    "quadratic": ("sgd", "momentum", "adam"),
    "logistic": ("sgd", "momentum", "adam"),
    "mlp-classify": ("sgd", "momentum", "adam"),
    "bandit-policy": ("sgd", "adam"),
}


class LearnerConfig(BaseModel):
    """学習器設定（オプティマイザ種別とハイパーパラメータ）"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    optimizer: OptimizerKind = "sgd"
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.95, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_grad_norm: Optional[float] = Field(None, gt=0.0)
    entropy_coef: float = Field(0.0, ge=0.0)
    eval_every: int = Field(1, ge=1)
    divergence_threshold: float = Field(1e10, gt=0.0)

    @property
    def label(self) -> str:
        clip = f"+clip{self.clip_grad_norm:g}" if self.clip_grad_norm else ""
        ent = f"+ent{self.entropy_coef:g}" if self.entropy_coef else ""
        return f"{self.optimizer}{clip}{ent}"


def check_compatibility(task: Task, config: LearnerConfig) -> None:
    """タスクとオプティマイザの組み合わせ検証"""
    supported = OPTIMIZER_SUPPORT[task.kind]
    if config.optimizer not in supported:
        raise ConfigurationError(
            f"optimizer '{config.optimizer}' cannot drive task '{task.kind}' "
            f"(supported: {', '.join(supported)})",
            key="learner.optimizer",
        )
    if config.entropy_coef > 0.0 and not task.is_policy:
        raise ConfigurationError(
            f"entropy_coef requires a policy task, got task '{task.kind}'",
            key="learner.entropy_coef",
        )


@dataclass(eq=False)
class LearnerState:
    """力学系の状態 𝒳_t = (θ_t, ξ_t)"""
    kind: str
    optimizer: str
    params: np.ndarray
    opt_state: Dict[str, np.ndarray] = field(default_factory=dict)
    step_index: int = 0
    lr: float = 0.0
    base_lr: float = 0.0
    entropy_coef: float = 0.0
    opt_step: int = 0
    rng_seed: int = 0
    diverged: bool = False

    def __post_init__(self):
        for key, vec in self.opt_state.items():
            if vec.shape != self.params.shape:
                raise ContractViolationError(
                    f"optimizer state '{key}' has shape {vec.shape}, params have {self.params.shape}"
                )

    def copy(self) -> "LearnerState":
        return LearnerState(
            kind=self.kind,
            optimizer=self.optimizer,
            params=self.params.copy(),
            opt_state={k: v.copy() for k, v in self.opt_state.items()},
            step_index=self.step_index,
            lr=self.lr,
            base_lr=self.base_lr,
            entropy_coef=self.entropy_coef,
            opt_step=self.opt_step,
            rng_seed=self.rng_seed,
            diverged=self.diverged,
        )

    def bitwise_equal(self, other: "LearnerState") -> bool:
        """ビット単位の一致判定"""
        scalars = ("kind", "optimizer", "step_index", "opt_step", "rng_seed", "diverged")
        if any(getattr(self, s) != getattr(other, s) for s in scalars):
            return False
        for s in ("lr", "base_lr", "entropy_coef"):
            if np.float64(getattr(self, s)).tobytes() != np.float64(getattr(other, s)).tobytes():
                return False
        if self.params.tobytes() != other.params.tobytes():
            return False
        if sorted(self.opt_state) != sorted(other.opt_state):
            return False
        return all(self.opt_state[k].tobytes() == other.opt_state[k].tobytes() for k in self.opt_state)


@dataclass(eq=False)
class StepRaw:
    """1ステップの生信号"""
    subbatch_grads: List[np.ndarray]
    grad: np.ndarray
    loss: float
    update_norm: float
    entropy: Optional[float] = None
    diverged: bool = False


class Evaluation(NamedTuple):
    performance: float
    diverged: bool


@dataclass(eq=False)
class PolicyContext:
    """方策学習器のステップ文脈（サンプル行動とベースライン）"""
    actions: np.ndarray
    baseline: float
    entropy_coef: float


GradTransform = Callable[[np.ndarray], np.ndarray]
StateTransform = Callable[[LearnerState], LearnerState]
SubgradTransform = Callable[[List[np.ndarray]], List[np.ndarray]]


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    return x - np.expand_dims(_logsumexp(x, axis=-1), -1)


def _target_matrix(targets: np.ndarray, classes: int) -> np.ndarray:
    """整数ラベル→one-hot、ソフトラベルはそのまま"""
    if targets.ndim == 2:
        return targets
    out = np.zeros((targets.shape[0], classes))
    out[np.arange(targets.shape[0]), targets.astype(np.int64)] = 1.0
    return out


def _weighted_mean(grads: Sequence[np.ndarray], splits: Sequence[np.ndarray]) -> np.ndarray:
    total = float(sum(len(s) for s in splits))
    out = np.zeros_like(grads[0])
    for g, s in zip(grads, splits):
        out += (len(s) / total) * g
    return out


class MicroLearner(ABC):
    """学習器基底クラス（タスクに束縛される）"""

    kind: str = ""

    def __init__(self, task: Task, config: LearnerConfig):
        check_compatibility(task, config)
        self.task = task
        self.config = config
        self.instance = TaskInstance(task)
        self.optimizer = build_optimizer(
            config.optimizer, momentum=config.momentum,
            beta1=config.beta1, beta2=config.beta2, eps=config.eps,
        )
        self._eval_sets: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    # ---- パラメータ構造 ----

    @abstractmethod
    def param_blocks(self) -> List[Tuple[str, slice, int]]:
        """(ブロック名, スライス, fan_in) のリスト"""

    @property
    def num_params(self) -> int:
        return self.param_blocks()[-1][1].stop

    def init_block(self, name: str, rng: np.random.Generator) -> np.ndarray:
        """初期化スキームに従いブロックを生成：uniform(±1/√fan_in)"""
        for block_name, sl, fan_in in self.param_blocks():
            if block_name == name:
                bound = 1.0 / np.sqrt(fan_in)
                return rng.uniform(-bound, bound, size=sl.stop - sl.start)
        raise KeyError(name)

    def layer_groups(self) -> List[List[str]]:
        """layer-resetの単位（既定はベクトル全体で1グループ）"""
        return [[name for name, _, _ in self.param_blocks()]]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([self.init_block(name, rng) for name, _, _ in self.param_blocks()])

    # ---- 目的関数と勾配 ----

    def prepare_context(self, state: LearnerState, batch: Batch) -> Any:
        return None

    @abstractmethod
    def objective(self, params: np.ndarray, batch: Batch, context: Any,
                  indices: Optional[np.ndarray] = None) -> float:
        """学習損失"""

    @abstractmethod
    def gradient(self, params: np.ndarray, batch: Batch, context: Any,
                 indices: Optional[np.ndarray] = None) -> np.ndarray:
        """損失の解析勾配"""

    def policy_entropy(self, params: np.ndarray) -> Optional[float]:
        return None

    @abstractmethod
    def performance(self, params: np.ndarray, eval_seed: int) -> float:
        """性能信号 J"""

    # ---- 遷移 ----

    def init_state(self, seed: int) -> LearnerState:
        """シード付き初期状態"""
        rng = stream_rng(seed, STREAM_INIT)
        params = self.init_params(rng)
        return LearnerState(
            kind=self.task.kind,
            optimizer=self.config.optimizer,
            params=params,
            opt_state=self.optimizer.init_state(params.shape[0]),
            step_index=0,
            lr=self.config.lr,
            base_lr=self.config.lr,
            entropy_coef=self.config.entropy_coef,
            rng_seed=seed,
        )

    def train_step(self,
                   state: LearnerState,
                   batch: Batch,
                   grad_transform: Optional[GradTransform] = None,
                   param_transform: Optional[StateTransform] = None,
                   subgrad_transform: Optional[SubgradTransform] = None) -> Tuple[LearnerState, StepRaw]:
        """1ステップ更新して新しい状態を返す"""
        if state.diverged:
            raise ContractViolationError("train_step called on a diverged state")

        new_state = state.copy()
        if param_transform is not None:
            new_state = param_transform(new_state)
        params = new_state.params

        context = self.prepare_context(new_state, batch)
        loss = float(self.objective(params, batch, context))
        subgrads = [self.gradient(params, batch, context, idx) for idx in batch.splits]
        if subgrad_transform is not None:
            subgrads = subgrad_transform(subgrads)
            grad = _weighted_mean(subgrads, batch.splits)
        else:
            grad = self.gradient(params, batch, context)
        if grad_transform is not None:
            grad = grad_transform(grad)

        entropy = self.policy_entropy(params)
        new_state.step_index = state.step_index + 1

        if (not np.isfinite(loss) or abs(loss) > self.config.divergence_threshold
                or not np.all(np.isfinite(grad))):
            new_state.diverged = True
            return new_state, StepRaw(subgrads, grad, loss, 0.0, entropy, True)

        clip = self.config.clip_grad_norm
        if clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > clip:
                grad = grad * (clip / norm)

        new_state.opt_step += 1
        update = self.optimizer.compute_update(grad, new_state.opt_state, new_state.lr, new_state.opt_step)
        new_params = params + update
        if not np.all(np.isfinite(new_params)):
            new_state.diverged = True
            return new_state, StepRaw(subgrads, grad, loss, 0.0, entropy, True)

        new_state.params = new_params
        return new_state, StepRaw(subgrads, grad, loss, float(np.linalg.norm(update)), entropy, False)

    def evaluate(self, state: LearnerState, eval_seed: int, floor: float = DIVERGED_FLOOR) -> Evaluation:
        """性能評価（発散時はフロア値）"""
        if state.diverged:
            return Evaluation(floor, True)
        perf = float(self.performance(state.params, eval_seed))
        if not np.isfinite(perf):
            return Evaluation(floor, True)
        return Evaluation(perf, False)

    def _eval_set(self, eval_seed: int) -> Tuple[np.ndarray, np.ndarray]:
        if eval_seed not in self._eval_sets:
            self._eval_sets[eval_seed] = self.instance.eval_sample(eval_seed)
        return self._eval_sets[eval_seed]

    def _chunked_mean_loss(self, params: np.ndarray, eval_seed: int,
                           loss_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], float]) -> float:
        x, y = self._eval_set(eval_seed)
        chunk = self.task.eval_batch_size
        total = 0.0
        for start in range(0, x.shape[0], chunk):
            total += loss_fn(params, x[start:start + chunk], y[start:start + chunk])
        return total / x.shape[0]


class QuadraticLearner(MicroLearner):
    """J(θ) = ½(θ−x)ᵀH(θ−x), H = diag(曲率スペクトル)"""

    kind = "quadratic"

    def param_blocks(self):
        return [("theta", slice(0, self.task.dim), 1)]

    def objective(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        diff = params[None, :] - x
        return 0.5 * float(np.mean(np.sum(self.instance.curvatures * diff * diff, axis=1)))

    def gradient(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        return self.instance.curvatures * (params - np.mean(x, axis=0))

    def performance(self, params, eval_seed):
        # 二次目的は厳密に評価する（eval_seed不要）
        return -0.5 * float(np.sum(self.instance.curvatures * params * params))


class LogisticLearner(MicroLearner):
    """2値ロジスティック回帰"""

    kind = "logistic"

    def param_blocks(self):
        d = self.task.dim
        return [("w", slice(0, d), d), ("b", slice(d, d + 1), d)]

    @staticmethod
    def _sum_loss(params: np.ndarray, x: np.ndarray, t: np.ndarray) -> float:
        z = x @ params[:-1] + params[-1]
        return float(np.sum(np.logaddexp(0.0, z) - t * z))

    def objective(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        t = batch.targets if indices is None else batch.targets[indices]
        return self._sum_loss(params, x, t) / x.shape[0]

    def gradient(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        t = batch.targets if indices is None else batch.targets[indices]
        z = x @ params[:-1] + params[-1]
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        r = (p - t) / x.shape[0]
        return np.concatenate([x.T @ r, [np.sum(r)]])

    def performance(self, params, eval_seed):
        return -self._chunked_mean_loss(params, eval_seed, self._sum_loss)


class MLPLearner(MicroLearner):
    """tanh 1隠れ層MLP + softmax交差エントロピー"""

    kind = "mlp-classify"

    def param_blocks(self):
        d, h, c = self.task.dim, self.task.hidden, self.task.classes
        w1 = h * d
        b1 = w1 + h
        w2 = b1 + c * h
        b2 = w2 + c
        return [
            ("W1", slice(0, w1), d),
            ("b1", slice(w1, b1), d),
            ("W2", slice(b1, w2), h),
            ("b2", slice(w2, b2), h),
        ]

    def layer_groups(self):
        return [[name] for name, _, _ in self.param_blocks()]

    def _unpack(self, params: np.ndarray):
        d, h, c = self.task.dim, self.task.hidden, self.task.classes
        blocks = {name: params[sl] for name, sl, _ in self.param_blocks()}
        return (blocks["W1"].reshape(h, d), blocks["b1"],
                blocks["W2"].reshape(c, h), blocks["b2"])

    def _forward(self, params: np.ndarray, x: np.ndarray):
        w1, b1, w2, b2 = self._unpack(params)
        hidden = np.tanh(x @ w1.T + b1)
        logits = hidden @ w2.T + b2
        return hidden, logits

    def _sum_loss(self, params: np.ndarray, x: np.ndarray, t: np.ndarray) -> float:
        _, logits = self._forward(params, x)
        targets = _target_matrix(t, self.task.classes)
        return float(-np.sum(targets * _log_softmax(logits)))

    def objective(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        t = batch.targets if indices is None else batch.targets[indices]
        return self._sum_loss(params, x, t) / x.shape[0]

    def gradient(self, params, batch, context, indices=None):
        x = batch.inputs if indices is None else batch.inputs[indices]
        t = batch.targets if indices is None else batch.targets[indices]
        n = x.shape[0]
        _, _, w2, _ = self._unpack(params)
        hidden, logits = self._forward(params, x)
        probs = np.exp(_log_softmax(logits))
        d_logits = (probs - _target_matrix(t, self.task.classes)) / n

        g_w2 = d_logits.T @ hidden
        g_b2 = d_logits.sum(axis=0)
        d_pre = (d_logits @ w2) * (1.0 - hidden * hidden)
        g_w1 = d_pre.T @ x
        g_b1 = d_pre.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def performance(self, params, eval_seed):
        return -self._chunked_mean_loss(params, eval_seed, self._sum_loss)


class PolicyLearner(MicroLearner):
    """k腕ガウシアンバンディット上のsoftmax REINFORCE（エントロピー正則化付き）"""

    kind = "bandit-policy"

    def param_blocks(self):
        k = self.task.arms
        return [("logits", slice(0, k), k)]

    def init_block(self, name, rng):
        # 方策ロジットは0（一様方策）
        return np.zeros(self.task.arms)

    def prepare_context(self, state, batch):
        logits = state.params[None, :]
        if batch.logit_noise is not None:
            logits = logits + batch.logit_noise
        probs = np.exp(_log_softmax(np.broadcast_to(logits, (batch.size, self.task.arms))))
        cdf = np.cumsum(probs, axis=1)
        actions = np.minimum(np.sum(cdf < batch.inputs[:, None], axis=1), self.task.arms - 1)
        rewards = batch.targets[np.arange(batch.size), actions]
        return PolicyContext(actions=actions, baseline=float(np.mean(rewards)),
                             entropy_coef=state.entropy_coef)

    def _advantages(self, batch: Batch, context: PolicyContext, indices: Optional[np.ndarray]):
        actions = context.actions if indices is None else context.actions[indices]
        rows = np.arange(batch.size) if indices is None else indices
        rewards = batch.targets[rows, actions]
        return actions, rewards - context.baseline

    def objective(self, params, batch, context, indices=None):
        log_pi = _log_softmax(params)
        pi = np.exp(log_pi)
        actions, adv = self._advantages(batch, context, indices)
        entropy = -float(np.sum(pi * log_pi))
        return -float(np.mean(adv * log_pi[actions])) - context.entropy_coef * entropy

    def gradient(self, params, batch, context, indices=None):
        log_pi = _log_softmax(params)
        pi = np.exp(log_pi)
        actions, adv = self._advantages(batch, context, indices)
        n = actions.shape[0]
        score = (np.bincount(actions, weights=adv, minlength=self.task.arms) - np.sum(adv) * pi) / n
        entropy = -float(np.sum(pi * log_pi))
        return -score + context.entropy_coef * pi * (log_pi + entropy)

    def policy_entropy(self, params):
        log_pi = _log_softmax(params)
        return -float(np.sum(np.exp(log_pi) * log_pi))

    def performance(self, params, eval_seed):
        # 腕平均から厳密に期待報酬を計算
        pi = np.exp(_log_softmax(params))
        return float(pi @ self.instance.arm_means)


_LEARNERS = {
    "quadratic": QuadraticLearner,
    "logistic": LogisticLearner,
    "mlp-classify": MLPLearner,
    "bandit-policy": PolicyLearner,
}


def build_learner(task: Task, config: LearnerConfig) -> MicroLearner:
    """タスク種別から学習器を生成"""
    return _LEARNERS[task.kind](task, config)


def init_learner(task: Task, config: LearnerConfig, seed: int) -> LearnerState:
    """学習器状態を初期化"""
    return build_learner(task, config).init_state(seed)


def train_step(learner: MicroLearner, state: LearnerState, batch: Batch,
               grad_transform: Optional[GradTransform] = None,
               param_transform: Optional[StateTransform] = None) -> Tuple[LearnerState, StepRaw]:
    return learner.train_step(state, batch, grad_transform=grad_transform, param_transform=param_transform)


def evaluate(learner: MicroLearner, state: LearnerState, eval_seed: int,
             floor: float = DIVERGED_FLOOR) -> Evaluation:
    return learner.evaluate(state, eval_seed, floor)
