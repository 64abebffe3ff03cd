"""
テレメトリチャネル計算
x_gen / x_inst / x_grad / x_mem の純関数とオンライン追跡器
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np

from ..utils.errors import ConfigurationError, ContractViolationError


CoherenceMode = Literal["pairwise", "to-mean"]


def _unit_rows(grads: np.ndarray) -> np.ndarray:
    """行ごとに正規化（ゼロベクトルはゼロのまま）"""
    norms = np.linalg.norm(grads, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where((norms > 0.0)[:, None], grads / safe[:, None], 0.0)


def gradient_coherence(grads: Sequence[np.ndarray], mode: CoherenceMode = "pairwise") -> float:
    """サブバッチ勾配の方向整合度（平均コサイン類似度）"""
    if len(grads) < 2:
        raise ContractViolationError(f"gradient coherence needs at least 2 gradients, got {len(grads)}")
    sizes = {np.shape(g) for g in grads}
    if len(sizes) != 1:
        raise ContractViolationError(f"gradient vectors have mismatched shapes: {sorted(sizes)}")

    stacked = np.vstack([np.ravel(g) for g in grads]).astype(np.float64)
    # 発散ステップの勾配は情報なしとして扱う
    if not np.all(np.isfinite(stacked)):
        return 0.0

    k = stacked.shape[0]
    if mode == "pairwise":
        units = _unit_rows(stacked)
        sims = units @ units.T
        upper = np.triu_indices(k, 1)
        value = float(np.mean(sims[upper]))
    elif mode == "to-mean":
        mean_grad = np.mean(stacked, axis=0)
        mean_norm = np.linalg.norm(mean_grad)
        if mean_norm == 0.0:
            return 0.0
        units = _unit_rows(stacked)
        value = float(np.mean(units @ (mean_grad / mean_norm)))
    else:
        raise ConfigurationError(f"unknown coherence mode '{mode}'", key="metrics.coherence")

    return float(np.clip(value, -1.0, 1.0))


def instability_index(perf_history: Sequence[float], window: int = 50) -> float:
    """直近ウィンドウ内の性能分散（母分散）"""
    if len(perf_history) == 0:
        raise ContractViolationError("instability index needs a nonempty history")
    tail = np.asarray(perf_history[-window:], dtype=np.float64)
    return float(np.var(tail))


def performance_trend(prev_trend: Optional[float], new_perf: float, alpha: float = 0.1) -> float:
    """性能のEMA（初回は観測値で初期化）"""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}", key="metrics.alpha")
    if prev_trend is None:
        return float(new_perf)
    return alpha * new_perf + (1.0 - alpha) * prev_trend


def state_persistence(prev_mem: float, update_norm: float, decay: float = 0.99) -> float:
    """更新ノルムのEMA"""
    if update_norm < 0.0:
        raise ContractViolationError(f"update norm must be nonnegative, got {update_norm}")
    return decay * prev_mem + (1.0 - decay) * update_norm


@dataclass(frozen=True)
class ChannelState:
    x_gen: float
    x_inst: float
    x_grad: float
    x_mem: float


class ChannelTracker:
    """ラン1本分のチャネル状態を逐次更新"""

    def __init__(self,
                 window: int = 50,
                 alpha: float = 0.1,
                 decay: float = 0.99,
                 coherence: CoherenceMode = "pairwise"):
        if not 0.0 < alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}", key="metrics.alpha")
        self.window = window
        self.alpha = alpha
        self.decay = decay
        self.coherence = coherence
        self.history: List[float] = []
        self.trend: Optional[float] = None
        self.memory = 0.0

    def update(self, performance: float, update_norm: float,
               grads: Optional[Sequence[np.ndarray]] = None,
               x_grad: Optional[float] = None) -> ChannelState:
        """1ステップ分のチャネル更新（x_gradは勾配から計算、またはログ値を使用）"""
        if x_grad is None:
            if grads is None:
                raise ContractViolationError("either grads or x_grad must be provided")
            x_grad = gradient_coherence(grads, self.coherence)

        self.history.append(float(performance))
        self.trend = performance_trend(self.trend, float(performance), self.alpha)
        self.memory = state_persistence(self.memory, float(update_norm), self.decay)
        return ChannelState(
            x_gen=self.trend,
            x_inst=instability_index(self.history, self.window),
            x_grad=float(x_grad),
            x_mem=self.memory,
        )


def recompute_channels(performance: Sequence[float],
                       update_norms: Sequence[float],
                       x_grads: Sequence[float],
                       window: int = 50,
                       alpha: float = 0.1,
                       decay: float = 0.99) -> List[ChannelState]:
    """ログ済みの生カラムからチャネル列を再計算"""
    if not len(performance) == len(update_norms) == len(x_grads):
        raise ContractViolationError("telemetry columns have mismatched lengths")
    tracker = ChannelTracker(window=window, alpha=alpha, decay=decay)
    return [tracker.update(j, u, x_grad=g) for j, u, g in zip(performance, update_norms, x_grads)]
