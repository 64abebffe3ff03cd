"""
摂動注入
各シーム（オプティマイザ・バッチ・パラメータ・信号）への注入と、ステップ単位のエンジン
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .specs import ActiveWindow, PerturbationSpec, resolve_schedule
from ..learners.learners import LearnerState, MicroLearner
from ..learners.optimizers import first_moment_key
from ..learners.tasks import STREAM_PERTURB, Batch, stream_rng
from ..utils.errors import ConfigurationError


def apply_optimization(spec: PerturbationSpec,
                       state: Optional[LearnerState],
                       grad: Optional[np.ndarray],
                       rng: np.random.Generator) -> Tuple[LearnerState, Optional[np.ndarray]]:
    """最適化次元の摂動（stateはインプレース更新）"""
    if spec.is_inert:
        return state, grad
    m = spec.magnitude

    if spec.kind == "lr-spike":
        state.lr = state.lr * m
    elif spec.kind == "momentum-noise":
        key = first_moment_key(state.optimizer)
        if not key:
            raise ConfigurationError(f"optimizer '{state.optimizer}' has no first moment", key="perturbations.kind")
        state.opt_state[key] = state.opt_state[key] + rng.normal(0.0, m, size=state.params.shape[0])
    elif spec.kind == "adam-v-scale":
        if "v" not in state.opt_state:
            raise ConfigurationError(f"optimizer '{state.optimizer}' has no second moment", key="perturbations.kind")
        state.opt_state["v"] = state.opt_state["v"] * m
    elif spec.kind == "grad-scale":
        if grad is not None:
            grad = grad * (1.0 + rng.uniform(-m, m))
    else:
        raise ConfigurationError(f"'{spec.kind}' is not an optimization perturbation", key="perturbations.kind")
    return state, grad


def apply_data(spec: PerturbationSpec, batch: Batch, rng: np.random.Generator,
               num_classes: int = 2, arms: int = 0) -> Batch:
    """データ次元の摂動（新しいBatchを返す）"""
    if spec.is_inert:
        return batch
    m = spec.magnitude
    out = batch.copy()

    if spec.kind == "input-noise":
        out.inputs = out.inputs + rng.normal(0.0, m, size=out.inputs.shape)
    elif spec.kind == "distribution-drift":
        out.inputs = out.inputs + m
    elif spec.kind == "corruption":
        mask = rng.random(out.inputs.shape) < m
        replacement = rng.standard_normal(out.inputs.shape)
        out.inputs = np.where(mask, replacement, out.inputs)
    elif spec.kind == "label-corrupt":
        mask = rng.random(out.size) < m
        replacement = rng.integers(0, num_classes, size=out.size).astype(out.targets.dtype)
        out.targets = np.where(mask, replacement, out.targets)
    elif spec.kind == "action-noise":
        noise = rng.normal(0.0, m, size=(out.size, arms))
        out.logit_noise = noise if out.logit_noise is None else out.logit_noise + noise
    else:
        raise ConfigurationError(f"'{spec.kind}' is not a data perturbation", key="perturbations.kind")
    return out


def apply_parametric(spec: PerturbationSpec, state: LearnerState, rng: np.random.Generator,
                     learner: Optional[MicroLearner] = None) -> LearnerState:
    """パラメータ次元の摂動（stateはインプレース更新）"""
    if spec.is_inert:
        return state

    if spec.kind == "weight-noise":
        state.params = state.params + rng.normal(0.0, spec.magnitude, size=state.params.shape[0])
    elif spec.kind == "layer-reset":
        if learner is None:
            raise ConfigurationError("layer-reset needs the learner's block layout", key="perturbations.kind")
        groups = learner.layer_groups()
        count = min(max(int(round(spec.magnitude)), 1), len(groups))
        chosen = sorted(rng.choice(len(groups), size=count, replace=False).tolist())
        slices = {name: sl for name, sl, _ in learner.param_blocks()}
        params = state.params.copy()
        moments = {k: v.copy() for k, v in state.opt_state.items()}
        for index in chosen:
            for name in groups[index]:
                sl = slices[name]
                params[sl] = learner.init_block(name, rng)
                for vec in moments.values():
                    vec[sl] = 0.0
        state.params = params
        state.opt_state = moments
    else:
        raise ConfigurationError(f"'{spec.kind}' is not a parametric perturbation", key="perturbations.kind")
    return state


def smooth_labels(targets: np.ndarray, alpha: float, num_classes: int) -> np.ndarray:
    """(1−α)·one_hot + α/C"""
    if targets.ndim == 1 and num_classes == 2 and not np.issubdtype(targets.dtype, np.integer):
        # ロジスティック回帰の2値ターゲット
        return (1.0 - alpha) * targets + alpha / 2.0
    if targets.ndim == 2:
        return (1.0 - alpha) * targets + alpha / num_classes
    one_hot = np.zeros((targets.shape[0], num_classes))
    one_hot[np.arange(targets.shape[0]), targets.astype(np.int64)] = 1.0
    return (1.0 - alpha) * one_hot + alpha / num_classes


def apply_signal(spec: PerturbationSpec, signal: np.ndarray, rng: np.random.Generator,
                 num_classes: int = 2) -> np.ndarray:
    """学習信号次元の摂動（勾配・報酬表・ターゲット）"""
    if spec.is_inert:
        return signal
    m = spec.magnitude

    if spec.kind == "reward-noise":
        return signal + rng.normal(0.0, m, size=signal.shape)
    if spec.kind == "reward-scale":
        return signal * m
    if spec.kind == "label-smooth":
        return smooth_labels(signal, m, num_classes)
    if spec.kind == "grad-sign-flip":
        flips = rng.random(signal.shape) < m
        return np.where(flips, -signal, signal)
    if spec.kind == "grad-mask":
        drop = rng.random(signal.shape) < m
        return np.where(drop, 0.0, signal)
    raise ConfigurationError(f"'{spec.kind}' is not a learning-signal perturbation", key="perturbations.kind")


@dataclass
class StepHooks:
    """train_stepに渡すフック一式"""
    grad_transform: Optional[Callable[[np.ndarray], np.ndarray]] = None
    param_transform: Optional[Callable[[LearnerState], LearnerState]] = None
    subgrad_transform: Optional[Callable[[List[np.ndarray]], List[np.ndarray]]] = None


class PerturbationEngine:
    """ラン1本分の摂動注入（合成順: data → signal → optimization → parametric）"""

    def __init__(self,
                 specs: Sequence[PerturbationSpec],
                 total_steps: int,
                 seed: int,
                 learner: MicroLearner):
        self.specs = list(specs)
        self.windows: List[ActiveWindow] = [resolve_schedule(s, total_steps) for s in self.specs]
        self.seed = seed
        self.learner = learner
        self.num_classes = learner.task.num_classes
        self.arms = learner.task.arms if learner.task.is_policy else 0

    def _rng(self, index: int, step: int) -> np.random.Generator:
        spec = self.specs[index]
        return stream_rng(self.seed, STREAM_PERTURB + spec.rng_stream_id, index, step)

    def _live(self, step: int, seams: Tuple[str, ...], dimensions: Tuple[str, ...] = ()):
        for index, (spec, window) in enumerate(zip(self.specs, self.windows)):
            if step not in window or spec.is_inert:
                continue
            if spec.info.seam in seams and (not dimensions or spec.dimension in dimensions):
                yield index, spec

    def is_active(self, step: int) -> bool:
        """ステップ内で実効的な摂動があるか"""
        return any(step in w and not s.is_inert for s, w in zip(self.specs, self.windows))

    def injection_steps(self) -> List[int]:
        return [w.start for w in self.windows]

    def apply_data(self, batch: Batch, step: int) -> Batch:
        """バッチ上の摂動（データ次元→信号次元）"""
        for dims in (("data",), ("signal",)):
            for index, spec in self._live(step, ("batch",), dims):
                rng = self._rng(index, step)
                if spec.dimension == "data":
                    batch = apply_data(spec, batch, rng, self.num_classes, self.arms)
                else:
                    batch = batch.copy()
                    batch.targets = apply_signal(spec, batch.targets, rng, self.num_classes)
        return batch

    def hooks(self, step: int, lr_scale: float = 1.0) -> StepHooks:
        """ステップのフック（学習率は毎ステップ base_lr·lr_scale から再設定）"""
        optimizer_specs = list(self._live(step, ("optimizer",)))
        grad_specs = [(i, s) for i, s in self._live(step, ("grad",)) if s.dimension == "signal"]
        grad_specs += [(i, s) for i, s in self._live(step, ("grad",)) if s.dimension == "optimization"]

        def param_transform(state: LearnerState) -> LearnerState:
            state.lr = state.base_lr * lr_scale
            for index, spec in optimizer_specs:
                state, _ = apply_optimization(spec, state, None, self._rng(index, step))
            return state

        hooks = StepHooks(param_transform=param_transform)

        coordinate = [(i, s) for i, s in grad_specs if s.granularity == "coordinate"]
        per_subbatch = [(i, s) for i, s in grad_specs if s.granularity == "subbatch"]

        if coordinate:
            def grad_transform(grad: np.ndarray) -> np.ndarray:
                for index, spec in coordinate:
                    rng = self._rng(index, step)
                    if spec.dimension == "signal":
                        grad = apply_signal(spec, grad, rng, self.num_classes)
                    else:
                        _, grad = apply_optimization(spec, None, grad, rng)
                return grad
            hooks.grad_transform = grad_transform

        if per_subbatch:
            def subgrad_transform(grads: List[np.ndarray]) -> List[np.ndarray]:
                for index, spec in per_subbatch:
                    flips = self._rng(index, step).random(len(grads)) < spec.magnitude
                    grads = [-g if f else g for g, f in zip(grads, flips)]
                return grads
            hooks.subgrad_transform = subgrad_transform

        return hooks

    def apply_parametric(self, state: LearnerState, step: int) -> LearnerState:
        """更新後のパラメータ摂動"""
        live = list(self._live(step, ("params",)))
        if not live:
            return state
        state = state.copy()
        for index, spec in live:
            state = apply_parametric(spec, state, self._rng(index, step), self.learner)
        return state
