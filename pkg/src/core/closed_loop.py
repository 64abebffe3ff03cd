"""
閉ループプローブ
潜在偏差が κ を m ステップ連続で超えたときだけ学習率を減衰させる識別性プローブ
"""

import json
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence, Tuple

from ..utils.config import ClosedLoopConfig


@dataclass(frozen=True)
class StreakState:
    """連続超過カウンタと予算"""
    streak: int = 0
    activations: int = 0
    lr_scale: float = 1.0


@dataclass(frozen=True)
class ClosedLoopAction:
    step: int
    deviation: float
    kind: str
    lr_scale: float


@dataclass(frozen=True)
class ClosedLoopEvaluation:
    """1ステップ分の判定ログ（発火の有無に関わらず記録）"""
    step: int
    deviation: float
    streak: int
    fired: bool
    activations: int
    lr_scale: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def closed_loop_step(deviation: float,
                     state: StreakState,
                     config: ClosedLoopConfig,
                     step: int) -> Tuple[StreakState, Optional[ClosedLoopAction]]:
    """1ステップの判定：連続 m ステップ目で1回だけ発火"""
    streak = state.streak + 1 if deviation > config.kappa else 0
    if streak == config.consecutive and state.activations < config.max_activations:
        lr_scale = max(state.lr_scale * config.damp, config.lr_floor_frac)
        action = ClosedLoopAction(step=step, deviation=deviation, kind="lr-damp", lr_scale=lr_scale)
        return StreakState(streak, state.activations + 1, lr_scale), action
    return replace(state, streak=streak), None


class ClosedLoopProbe:
    """ラン1本分のプローブ状態"""

    def __init__(self, config: ClosedLoopConfig):
        self.config = config
        self.state = StreakState()
        self.evaluations: List[ClosedLoopEvaluation] = []
        self.actions: List[ClosedLoopAction] = []

    @property
    def lr_scale(self) -> float:
        return self.state.lr_scale

    def observe(self, step: int, deviation: float) -> Optional[ClosedLoopAction]:
        self.state, action = closed_loop_step(deviation, self.state, self.config, step)
        if action is not None:
            self.actions.append(action)
        self.evaluations.append(ClosedLoopEvaluation(
            step=step,
            deviation=deviation,
            streak=self.state.streak,
            fired=action is not None,
            activations=self.state.activations,
            lr_scale=self.state.lr_scale,
        ))
        return action


def simulate_probe(scores: Sequence[float], config: ClosedLoopConfig) -> ClosedLoopProbe:
    """偏差スコア列に対するプローブ判定の再現"""
    probe = ClosedLoopProbe(config)
    for step, score in enumerate(scores):
        probe.observe(step, float(score))
    return probe
