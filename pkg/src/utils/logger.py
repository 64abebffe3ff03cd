"""
ログ管理・エラー処理機能
較正→ベースライン→摂動→モニター学習→メトリクス→出力 各ステップの詳細ログ保存
"""

import hashlib
import json
import logging
import sys
import traceback
from dataclasses import asdict, dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Set

import aiofiles

from .errors import ArtifactIOError, ConfigurationError, StabilityAuditError


class LogLevel(Enum):
    """ログレベル"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class ProcessStep(Enum):
    """処理ステップ"""
    CALIBRATION = "calibration"
    BASELINE = "baseline"
    PERTURBED = "perturbed"
    MONITOR_FIT = "monitor_fit"
    METRICS = "metrics"
    REPLAY = "replay"
    EXPORT = "export"
    SWEEP = "sweep"
    COMPLETE = "complete"


@dataclass
class LogEntry:
    """ログエントリ"""
    timestamp: str
    level: str
    step: str
    run_id: str
    message: str
    details: Dict[str, Any] = None
    error_trace: Optional[str] = None
    processing_time: Optional[float] = None

    def __post_init__(self):
        if self.details is None:
            self.details = {}


class AuditLogger:
    """監査エンジン専用ロガー"""

    LOGGER_NAME = "stability_audit"
    _attached_dirs: Set[Path] = set()

    def __init__(self,
                 log_dir: Path = Path("logs"),
                 log_level: LogLevel = LogLevel.INFO,
                 console_output: bool = False):

        self.log_dir = Path(log_dir)
        self.log_level = log_level
        self.console_output = console_output

        # ログディレクトリ作成
        self.log_dir.mkdir(parents=True, exist_ok=True)

        timestamp = datetime.now().strftime("%Y%m%d")
        self.main_log_file = self.log_dir / f"stability_audit_{timestamp}.log"
        self.error_log_file = self.log_dir / f"stability_audit_errors_{timestamp}.log"
        self.json_log_file = self.log_dir / f"stability_audit_{timestamp}.json"

        # 成果物ディレクトリごとに子ロガーを分け、ハンドラーは1回だけ追加
        resolved = self.log_dir.resolve()
        digest = hashlib.sha1(str(resolved).encode("utf-8")).hexdigest()[:8]
        self.logger = logging.getLogger(f"{self.LOGGER_NAME}.{digest}")
        self.logger.setLevel(getattr(logging, log_level.value))
        if resolved not in AuditLogger._attached_dirs:
            self._setup_handlers()
            AuditLogger._attached_dirs.add(resolved)

        self.json_logs: List[LogEntry] = []

    def _setup_handlers(self):
        """ログハンドラー設定"""
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        file_handler = logging.FileHandler(self.main_log_file, encoding='utf-8')
        file_handler.setLevel(getattr(logging, self.log_level.value))
        file_handler.setFormatter(formatter)

        error_handler = logging.FileHandler(self.error_log_file, encoding='utf-8')
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(formatter)

        self.logger.addHandler(file_handler)
        self.logger.addHandler(error_handler)

        if self.console_output:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(getattr(logging, self.log_level.value))
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

    def log(self,
            level: LogLevel,
            step: ProcessStep,
            run_id: str,
            message: str,
            details: Dict[str, Any] = None,
            error: Exception = None,
            processing_time: float = None):
        """ログエントリ作成"""
        log_entry = LogEntry(
            timestamp=datetime.now().isoformat(),
            level=level.value,
            step=step.value,
            run_id=run_id,
            message=message,
            details=dict(details or {}),
            processing_time=processing_time,
        )

        if error:
            log_entry.error_trace = traceback.format_exc()
            log_entry.details["error_type"] = type(error).__name__
            log_entry.details["error_message"] = str(error)

        log_method = getattr(self.logger, level.value.lower())
        log_message = f"[{step.value}] {run_id} - {message}"
        if details:
            log_message += f" | Details: {json.dumps(details, ensure_ascii=False, default=str)}"

        if error:
            log_method(log_message, exc_info=True)
        else:
            log_method(log_message)

        self.json_logs.append(log_entry)

    def info(self, step: ProcessStep, run_id: str, message: str, **kwargs):
        """情報ログ"""
        self.log(LogLevel.INFO, step, run_id, message, **kwargs)

    def warning(self, step: ProcessStep, run_id: str, message: str, **kwargs):
        """警告ログ"""
        self.log(LogLevel.WARNING, step, run_id, message, **kwargs)

    def error(self, step: ProcessStep, run_id: str, message: str, error: Exception = None, **kwargs):
        """エラーログ"""
        self.log(LogLevel.ERROR, step, run_id, message, error=error, **kwargs)

    def debug(self, step: ProcessStep, run_id: str, message: str, **kwargs):
        """デバッグログ"""
        self.log(LogLevel.DEBUG, step, run_id, message, **kwargs)

    async def save_json_logs(self):
        """JSONログをファイルに保存"""
        if not self.json_logs:
            return

        json_data = {
            "session_start": self.json_logs[0].timestamp,
            "session_end": datetime.now().isoformat(),
            "total_entries": len(self.json_logs),
            "logs": [asdict(log) for log in self.json_logs],
        }

        async with aiofiles.open(self.json_log_file, 'w', encoding='utf-8') as f:
            await f.write(json.dumps(json_data, indent=2, ensure_ascii=False, default=str))


class ErrorHandler:
    """エラーハンドリング"""

    def __init__(self, logger: AuditLogger):
        self.logger = logger

    def handle_divergence(self, step: ProcessStep, run_id: str, at_step: int) -> Dict[str, Any]:
        """数値発散（ランは打ち切り、監査は継続）"""
        self.logger.warning(step, run_id, "Run diverged numerically; terminated with diverged marker",
                            details={"step": at_step})
        return {"success": True, "diverged": True, "step": at_step}

    def handle_run_error(self, step: ProcessStep, run_id: str, error: Exception) -> Dict[str, Any]:
        """ラン実行エラーハンドリング"""
        self.logger.error(step, run_id, "Run failed", error=error,
                          details={"category": self.classify(error)})
        return {
            "success": False,
            "error_type": type(error).__name__,
            "error_message": str(error),
            "abort_audit": self.should_abort(error),
        }

    @staticmethod
    def classify(error: Exception) -> str:
        """エラー分類"""
        if isinstance(error, (ConfigurationError,)):
            return "configuration"
        if isinstance(error, (OSError, ArtifactIOError)):
            return "io"
        if isinstance(error, FloatingPointError):
            return "numerical"
        if isinstance(error, StabilityAuditError):
            return "audit"
        return "runtime"

    def should_abort(self, error: Exception) -> bool:
        """監査全体を中断すべきか"""
        return self.classify(error) in ("io", "configuration", "runtime", "audit")


class ProgressTracker:
    """進捗トラッキング"""

    def __init__(self, logger: AuditLogger):
        self.logger = logger
        self.start_time: Optional[datetime] = None
        self.total_runs = 0
        self.step_start_times: Dict[str, datetime] = {}

    def start_session(self, total_runs: int, details: Dict[str, Any] = None):
        """セッション開始"""
        self.start_time = datetime.now()
        self.total_runs = total_runs
        self.logger.info(ProcessStep.COMPLETE, "session", "Audit session started",
                         details={"total_runs": total_runs, **(details or {})})

    def start_step(self, step: ProcessStep, run_id: str):
        """ステップ開始"""
        self.step_start_times[f"{step.value}_{run_id}"] = datetime.now()
        self.logger.debug(step, run_id, f"Step {step.value} started")

    def end_step(self, step: ProcessStep, run_id: str, success: bool = True, details: Dict[str, Any] = None):
        """ステップ終了"""
        key = f"{step.value}_{run_id}"
        started = self.step_start_times.pop(key, None)
        processing_time = (datetime.now() - started).total_seconds() if started else None
        status = "completed" if success else "failed"
        self.logger.info(step, run_id, f"Step {step.value} {status}",
                         details=details, processing_time=processing_time)

    def end_session(self, processed_runs: int, successful_runs: int):
        """セッション終了"""
        total_time = (datetime.now() - self.start_time).total_seconds() if self.start_time else 0.0
        self.logger.info(
            ProcessStep.COMPLETE,
            "session",
            "Audit session completed",
            details={
                "total_runs": self.total_runs,
                "processed_runs": processed_runs,
                "successful_runs": successful_runs,
                "success_rate": (successful_runs / processed_runs * 100) if processed_runs > 0 else 0,
                "total_processing_time": total_time,
            },
            processing_time=total_time,
        )
