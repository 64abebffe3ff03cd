"""
テレメトリレコード
1ステップ分の記録とJSONLエンコード
"""

import json
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from .channels import ChannelState
from ..utils.errors import ContractViolationError


TELEMETRY_FIELDS = (
    "step", "J", "loss", "x_gen", "x_inst", "x_grad", "x_mem",
    "update_norm", "entropy", "perturb_active", "diverged",
)


@dataclass(frozen=True)
class TelemetryRecord:
    """テレメトリレコード"""
    step: int
    performance: float
    loss: float
    x_gen: float
    x_inst: float
    x_grad: float
    x_mem: float
    update_norm: float
    entropy: Optional[float] = None
    perturb_active: bool = False
    diverged: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "J": self.performance,
            "loss": self.loss,
            "x_gen": self.x_gen,
            "x_inst": self.x_inst,
            "x_grad": self.x_grad,
            "x_mem": self.x_mem,
            "update_norm": self.update_norm,
            "entropy": self.entropy,
            "perturb_active": self.perturb_active,
            "diverged": self.diverged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TelemetryRecord":
        missing = [f for f in TELEMETRY_FIELDS if f not in data]
        if missing:
            raise ContractViolationError(f"telemetry line missing fields: {', '.join(missing)}")
        return cls(
            step=int(data["step"]),
            performance=float(data["J"]),
            loss=float(data["loss"]),
            x_gen=float(data["x_gen"]),
            x_inst=float(data["x_inst"]),
            x_grad=float(data["x_grad"]),
            x_mem=float(data["x_mem"]),
            update_norm=float(data["update_norm"]),
            entropy=None if data["entropy"] is None else float(data["entropy"]),
            perturb_active=bool(data["perturb_active"]),
            diverged=bool(data["diverged"]),
        )

    @classmethod
    def from_json(cls, line: str) -> "TelemetryRecord":
        return cls.from_dict(json.loads(line))


def assemble_record(step: int,
                    raw,
                    performance: float,
                    channels: ChannelState,
                    perturb_active: bool = False,
                    previous_step: Optional[int] = None) -> TelemetryRecord:
    """StepRawと性能・チャネルから1レコードを組み立てる"""
    if previous_step is not None and step <= previous_step:
        raise ContractViolationError(f"telemetry step {step} does not follow step {previous_step}")
    return TelemetryRecord(
        step=step,
        performance=float(performance),
        loss=float(raw.loss),
        x_gen=channels.x_gen,
        x_inst=channels.x_inst,
        x_grad=channels.x_grad,
        x_mem=channels.x_mem,
        update_norm=float(raw.update_norm),
        entropy=raw.entropy,
        perturb_active=perturb_active,
        diverged=bool(raw.diverged),
    )


class TelemetryStream:
    """ラン1本分のレコード列（ステップ順を保証）"""

    def __init__(self):
        self.records: List[TelemetryRecord] = []

    @property
    def last_step(self) -> Optional[int]:
        return self.records[-1].step if self.records else None

    def append(self, record: TelemetryRecord) -> None:
        if self.last_step is not None and record.step <= self.last_step:
            raise ContractViolationError(f"telemetry step {record.step} does not follow step {self.last_step}")
        self.records.append(record)

    def column(self, name: str) -> List[Any]:
        """JSONフィールド名で列を取得"""
        return [rec.to_dict()[name] for rec in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)
