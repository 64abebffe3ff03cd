"""
摂動仕様
次元・種類・強度・スケジュールの宣言的記述とその検証
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..learners.tasks import ALL_KINDS, LABELLED_KINDS, POLICY_KINDS, SUPERVISED_KINDS, Task
from ..learners.learners import LearnerConfig
from ..utils.errors import ConfigurationError


Dimension = Literal["optimization", "data", "parametric", "signal"]
Seam = Literal["optimizer", "batch", "params", "grad"]

ALL_OPTIMIZERS = frozenset({"sgd", "momentum", "adam"})


@dataclass(frozen=True)
class KindInfo:
    """摂動種類のカタログ情報"""
    dimension: str
    seam: str
    default_magnitude: float
    one_shot: bool = False
    max_magnitude: Optional[float] = None
    tasks: FrozenSet[str] = ALL_KINDS
    optimizers: FrozenSet[str] = ALL_OPTIMIZERS
    description: str = ""


KIND_CATALOG: Dict[str, KindInfo] = {
    # 最適化次元
    "lr-spike": KindInfo("optimization", "optimizer", 10.0,
                         description="lr <- base_lr x magnitude inside the window"),
    "momentum-noise": KindInfo("optimization", "optimizer", 0.1,
                               optimizers=frozenset({"momentum", "adam"}),
                               description="Gaussian noise on the first moment"),
    "adam-v-scale": KindInfo("optimization", "optimizer", 10.0,
                             optimizers=frozenset({"adam"}),
                             description="second moment multiplied by magnitude"),
    "grad-scale": KindInfo("optimization", "grad", 0.2,
                           description="gradient rescaled by 1 + U(-m, m)"),
    # データ次元
    "input-noise": KindInfo("data", "batch", 0.1, tasks=SUPERVISED_KINDS,
                            description="additive Gaussian input noise"),
    "action-noise": KindInfo("data", "batch", 0.05, tasks=POLICY_KINDS,
                             description="Gaussian noise on sampling logits"),
    "corruption": KindInfo("data", "batch", 0.05, max_magnitude=1.0, tasks=SUPERVISED_KINDS,
                           description="fraction of input entries replaced"),
    "label-corrupt": KindInfo("data", "batch", 0.05, max_magnitude=1.0, tasks=LABELLED_KINDS,
                              description="fraction of labels replaced"),
    "distribution-drift": KindInfo("data", "batch", 0.5, tasks=SUPERVISED_KINDS,
                                   description="constant shift of every input entry"),
    # パラメータ次元
    "weight-noise": KindInfo("parametric", "params", 0.01, one_shot=True,
                             description="additive Gaussian parameter noise"),
    "layer-reset": KindInfo("parametric", "params", 1.0, one_shot=True,
                            description="parameter blocks re-drawn from the init scheme"),
    # 学習信号次元
    "reward-noise": KindInfo("signal", "batch", 0.5, tasks=POLICY_KINDS,
                             description="additive Gaussian reward noise"),
    "reward-scale": KindInfo("signal", "batch", 0.1, tasks=POLICY_KINDS,
                             description="rewards multiplied by magnitude"),
    "label-smooth": KindInfo("signal", "batch", 0.2, max_magnitude=1.0, tasks=LABELLED_KINDS,
                             description="targets smoothed towards uniform"),
    "grad-sign-flip": KindInfo("signal", "grad", 0.1, max_magnitude=1.0, tasks=SUPERVISED_KINDS,
                               description="gradient sign inverted with probability magnitude"),
    "grad-mask": KindInfo("signal", "grad", 0.1, max_magnitude=1.0, tasks=SUPERVISED_KINDS,
                          description="gradient coordinates zeroed with probability magnitude"),
}

DEFAULT_DURATION = 10
DEFAULT_SWEEP_FRACS: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class PerturbationSpec(BaseModel):
    """摂動仕様（何を・どの強さで・いつ）"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    dimension: Dimension
    kind: str
    magnitude: float = Field(..., ge=0.0)
    start_frac: float = Field(0.3, gt=0.0, lt=1.0)
    duration: Union[int, Literal["one-shot"]] = DEFAULT_DURATION
    rng_stream_id: int = Field(0, ge=0)
    granularity: Literal["coordinate", "subbatch"] = "coordinate"

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        info = KIND_CATALOG.get(data.get("kind"))
        if info is None:
            known = ", ".join(sorted(KIND_CATALOG))
            raise ValueError(f"unknown perturbation kind '{data.get('kind')}' (known: {known})")
        data = dict(data)
        data.setdefault("dimension", info.dimension)
        if data.get("magnitude") is None:
            data["magnitude"] = info.default_magnitude
        if data.get("duration") is None:
            data["duration"] = "one-shot" if info.one_shot else DEFAULT_DURATION
        return data

    @model_validator(mode="after")
    def _check_kind(self) -> "PerturbationSpec":
        info = KIND_CATALOG[self.kind]
        if info.dimension != self.dimension:
            raise ValueError(f"kind '{self.kind}' belongs to dimension '{info.dimension}', not '{self.dimension}'")
        if info.max_magnitude is not None and self.magnitude > info.max_magnitude:
            raise ValueError(f"magnitude {self.magnitude} outside [0, {info.max_magnitude}] for kind '{self.kind}'")
        if isinstance(self.duration, int) and self.duration < 1:
            raise ValueError("duration must be a positive integer or 'one-shot'")
        if self.granularity == "subbatch" and self.kind != "grad-sign-flip":
            raise ValueError("subbatch granularity applies only to grad-sign-flip")
        return self

    @property
    def info(self) -> KindInfo:
        return KIND_CATALOG[self.kind]

    @property
    def duration_steps(self) -> int:
        return 1 if self.duration == "one-shot" else int(self.duration)

    @property
    def is_inert(self) -> bool:
        return self.magnitude == 0.0

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.start_frac:g}x{self.magnitude:g}"


@dataclass(frozen=True)
class ActiveWindow:
    """摂動が有効なステップ区間 [start, end]"""
    start: int
    end: int

    def __contains__(self, step: int) -> bool:
        return self.start <= step <= self.end

    @property
    def steps(self) -> List[int]:
        return list(range(self.start, self.end + 1))


def injection_step(start_frac: float, total_steps: int) -> int:
    """t_s = round(start_frac · total_steps)"""
    return int(round(start_frac * total_steps))


def resolve_schedule(spec: PerturbationSpec, total_steps: int) -> ActiveWindow:
    """スケジュール解決"""
    duration = spec.duration_steps
    if total_steps <= duration:
        raise ConfigurationError(
            f"total_steps {total_steps} must exceed perturbation duration {duration}",
            key="total_steps",
        )
    t_s = injection_step(spec.start_frac, total_steps)
    end = t_s + duration - 1
    if t_s < 1 or t_s > total_steps - 1:
        raise ConfigurationError(
            f"injection step {t_s} outside [1, {total_steps - 1}]", key="perturbations.start_frac"
        )
    if end > total_steps - 1:
        raise ConfigurationError(
            f"perturbation window {t_s}..{end} exceeds run length {total_steps}",
            key="perturbations.duration",
        )
    return ActiveWindow(t_s, end)


def validate_specs(specs: Sequence[PerturbationSpec],
                   task: Task,
                   learner: LearnerConfig,
                   total_steps: int) -> List[ActiveWindow]:
    """監査開始前の互換性・スケジュール検証"""
    windows = []
    for index, spec in enumerate(specs):
        info = spec.info
        if task.kind not in info.tasks:
            raise ConfigurationError(
                f"perturbation '{spec.kind}' cannot be applied to task '{task.kind}'",
                key=f"perturbations.{index}.kind",
            )
        if learner.optimizer not in info.optimizers:
            raise ConfigurationError(
                f"perturbation '{spec.kind}' requires optimizer state that '{learner.optimizer}' lacks",
                key=f"perturbations.{index}.kind",
            )
        windows.append(resolve_schedule(spec, total_steps))
    return windows
