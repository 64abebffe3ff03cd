"""
オプティマイザ実装
フラットなパラメータベクトル上の SGD / Momentum / Adam
"""

from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np


class Optimizer(ABC):
    """オプティマイザ基底クラス"""

    name: str = ""
    state_keys: Tuple[str, ...] = ()
    first_moment_key: str = ""

    def init_state(self, size: int) -> Dict[str, np.ndarray]:
        """補助状態 ξ をゼロ初期化"""
        return {key: np.zeros(size) for key in self.state_keys}

    @abstractmethod
    def compute_update(self,
                       grad: np.ndarray,
                       opt_state: Dict[str, np.ndarray],
                       lr: float,
                       step: int) -> np.ndarray:
        """更新ベクトルΔθを計算（opt_stateはインプレース更新）"""


class SGD(Optimizer):
    name = "sgd"

    def compute_update(self, grad, opt_state, lr, step):
        return -lr * grad


class Momentum(Optimizer):
    name = "momentum"
    state_keys = ("velocity",)
    first_moment_key = "velocity"

    def __init__(self, beta: float = 0.9):
        self.beta = beta

    def compute_update(self, grad, opt_state, lr, step):
        velocity = opt_state["velocity"]
        velocity *= self.beta
        velocity += grad
        return -lr * velocity


class Adam(Optimizer):
    name = "adam"
    state_keys = ("m", "v")
    first_moment_key = "m"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def compute_update(self, grad, opt_state, lr, step):
        # step は 1 始まりのAdamタイムステップ
        m = opt_state["m"]
        v = opt_state["v"]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)

        bc1 = 1.0 - self.beta1 ** step
        bc2 = 1.0 - self.beta2 ** step
        denom = np.sqrt(v / bc2) + self.eps
        return -(lr / bc1) * m / denom


def build_optimizer(kind: str, momentum: float = 0.9, beta1: float = 0.9,
                    beta2: float = 0.95, eps: float = 1e-8) -> Optimizer:
    """種類名からオプティマイザを生成"""
    if kind == "sgd":
        return SGD()
    if kind == "momentum":
        return Momentum(beta=momentum)
    if kind == "adam":
        return Adam(beta1=beta1, beta2=beta2, eps=eps)
    raise ValueError(f"Unknown optimizer: {kind}")


OPTIMIZER_TYPES: Dict[str, type] = {cls.name: cls for cls in (SGD, Momentum, Adam)}


def first_moment_key(kind: str) -> str:
    """一次モーメントを持つ補助状態のキー（無ければ空文字）"""
    return OPTIMIZER_TYPES[kind].first_moment_key
