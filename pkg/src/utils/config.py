"""
監査設定
YAML設定ファイルの読み込み・ドット記法オーバーライド・SB_SEED・設定ハッシュ
"""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..analyzers.meta_state import MonitorConfig
from ..analyzers.stability_metrics import MetricParams
from ..learners.learners import LearnerConfig, check_compatibility
from ..learners.tasks import Task
from ..perturbations.specs import PerturbationSpec, injection_step, validate_specs
from .errors import ConfigurationError


SEED_ENV_VAR = "SB_SEED"
FORMAT_VERSION = 1
_SEED_LIMIT = 1 << 64


class ClosedLoopConfig(BaseModel):
    """閉ループプローブ設定"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = False
    kappa: float = Field(6.0, gt=0.0)
    consecutive: int = Field(5, ge=1)
    damp: float = Field(0.5, gt=0.0, lt=1.0)
    max_activations: int = Field(3, ge=0)
    lr_floor_frac: float = Field(0.01, gt=0.0, le=1.0)


class OutputConfig(BaseModel):
    """出力設定"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    directory: str = "artifacts"
    checkpoint_every: int = Field(0, ge=0)
    latents_csv: bool = False


class AuditConfig(BaseModel):
    """監査設定（タスク・学習器・摂動・メトリクス・モニター・閉ループ）"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "audit"
    task: Task
    learner: LearnerConfig
    total_steps: int = Field(..., ge=2)
    seeds: List[int] = Field(..., min_length=1)
    eval_seed: int = Field(0, ge=0)
    perturbations: List[PerturbationSpec] = Field(default_factory=list)
    metrics: MetricParams = Field(default_factory=MetricParams)
    monitor: MonitorConfig = Field(default_factory=MonitorConfig)
    closed_loop: ClosedLoopConfig = Field(default_factory=ClosedLoopConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds: List[int]) -> List[int]:
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        if any(s < 0 or s >= _SEED_LIMIT for s in seeds):
            raise ValueError("seeds must be unsigned 64-bit integers")
        return seeds

    @model_validator(mode="after")
    def _check_lengths(self) -> "AuditConfig":
        if self.total_steps < 2 * self.metrics.baseline_window:
            raise ValueError(
                f"total_steps ({self.total_steps}) must be at least twice metrics.baseline_window "
                f"({self.metrics.baseline_window})"
            )
        return self

    @property
    def t_max(self) -> int:
        return self.metrics.t_max or self.total_steps

    @property
    def reference_step(self) -> int:
        """ベースラインランのメトリクス基準ステップ"""
        return injection_step(self.metrics.reference_frac, self.total_steps)


def validate_audit(config: AuditConfig) -> None:
    """モデル横断の整合性検証（ConfigurationErrorでキー名を返す）"""
    check_compatibility(config.task, config.learner)
    windows = validate_specs(config.perturbations, config.task, config.learner, config.total_steps)
    for index, window in enumerate(windows):
        if window.start < 2:
            raise ConfigurationError(
                f"injection step {window.start} leaves fewer than 2 baseline steps",
                key=f"perturbations.{index}.start_frac",
            )

    ref = config.reference_step
    if ref < 2 or ref > config.total_steps - 1:
        raise ConfigurationError(f"reference step {ref} outside the run", key="metrics.reference_frac")
    if config.closed_loop.enabled and not config.monitor.enabled:
        raise ConfigurationError("closed_loop requires an enabled monitor", key="closed_loop.enabled")
    if config.monitor.enabled and config.monitor.ref == "fit-fresh":
        overlap = sorted(set(config.seeds) & set(config.monitor.calibration_seeds))
        if overlap:
            raise ConfigurationError(
                f"calibration seeds overlap audit seeds: {overlap}", key="monitor.calibration_seeds"
            )
        if len(config.monitor.calibration_seeds) < config.monitor.min_runs:
            raise ConfigurationError(
                f"monitor needs at least {config.monitor.min_runs} calibration seeds",
                key="monitor.calibration_seeds",
            )
        if config.total_steps < config.monitor.min_steps:
            raise ConfigurationError(
                f"monitor needs runs of at least {config.monitor.min_steps} steps",
                key="total_steps",
            )


def _error_key(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first.get("loc", ()))


def build_config(raw: Mapping[str, Any]) -> AuditConfig:
    """辞書からAuditConfigを検証付きで生成"""
    try:
        config = AuditConfig.model_validate(raw)
    except ValidationError as e:
        key = _error_key(e)
        first = e.errors()[0]
        raise ConfigurationError(f"invalid config key '{key}': {first.get('msg')}", key=key) from e
    validate_audit(config)
    return config


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """ドット記法のオーバーライドを適用（値はYAMLスカラーとして解釈）"""
    data = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got '{item}'", key=item)
        path, value_text = item.split("=", 1)
        parts = [p for p in path.strip().split(".") if p]
        if not parts:
            raise ConfigurationError(f"empty override key in '{item}'", key=path)
        value = yaml.safe_load(value_text)

        node: Any = data
        for depth, part in enumerate(parts):
            last = depth == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigurationError(f"override path '{path}' has no list entry '{part}'", key=path)
                if last:
                    node[int(part)] = value
                else:
                    node = node[int(part)]
            elif isinstance(node, dict):
                if last:
                    node[part] = value
                else:
                    node = node.setdefault(part, {})
            else:
                raise ConfigurationError(f"override path '{path}' descends into a scalar", key=path)
    return data


def seeds_from_env(env: Mapping[str, str]) -> Optional[List[int]]:
    """SB_SEED（カンマ区切り整数）"""
    value = env.get(SEED_ENV_VAR)
    if value is None or not value.strip():
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be comma-separated integers, got '{value}'",
                                 key=SEED_ENV_VAR) from e


@dataclass
class LoadedConfig:
    """読み込み済み設定と由来情報"""
    config: AuditConfig
    source: Optional[Path]
    seed_env: Optional[str]
    overrides: List[str]

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def load_config(path: Optional[Path] = None,
                overrides: Sequence[str] = (),
                env: Optional[Mapping[str, str]] = None,
                raw: Optional[Dict[str, Any]] = None) -> LoadedConfig:
    """YAML設定を読み込み、オーバーライド・SB_SEEDを適用して検証"""
    env = os.environ if env is None else env
    if raw is None:
        if path is None:
            raise ConfigurationError("either a config path or a raw mapping is required")
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}", key=str(path))
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}", key=str(path)) from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping", key=str(path))

    data = apply_overrides(raw, overrides)
    env_seeds = seeds_from_env(env)
    if env_seeds is not None:
        data["seeds"] = env_seeds

    return LoadedConfig(
        config=build_config(data),
        source=path,
        seed_env=env.get(SEED_ENV_VAR) if env_seeds is not None else None,
        overrides=list(overrides),
    )


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: BaseModel) -> str:
    """正規化JSONのSHA-256先頭16桁"""
    return hashlib.sha256(canonical_json(config.model_dump(mode="json")).encode("utf-8")).hexdigest()[:16]


def dump_effective(config: AuditConfig) -> str:
    """再実行可能な実効設定YAML"""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


def baseline_key(config: AuditConfig, seed: int, monitor_id: Optional[str] = None) -> str:
    """ベースライン共有キー（task, learner, seed, total_steps と実行条件）"""
    payload = {
        "task": config.task.model_dump(mode="json"),
        "learner": config.learner.model_dump(mode="json"),
        "seed": seed,
        "total_steps": config.total_steps,
        "eval_seed": config.eval_seed,
        "metrics": config.metrics.model_dump(mode="json"),
        "monitor": monitor_id,
        "closed_loop": config.closed_loop.model_dump(mode="json") if config.closed_loop.enabled else None,
        "checkpoint_every": config.output.checkpoint_every,
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]
