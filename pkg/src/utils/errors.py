"""
例外定義
監査エンジン全体で共有する例外階層
"""

from pathlib import Path
from typing import Optional


class StabilityAuditError(Exception):
    """監査エンジン基底例外"""


class ConfigurationError(StabilityAuditError, ValueError):
    """設定エラー（不正なキー・組み合わせ・範囲）"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ContractViolationError(StabilityAuditError, ValueError):
    """呼び出し契約違反（次元不一致・順序違反など）"""


class CheckpointCorruptionError(StabilityAuditError, ValueError):
    """チェックポイント/モデルblobの破損"""


class MetricUndefinedError(StabilityAuditError, ValueError):
    """メトリクスが定義できない入力"""


class MonitorTrainingError(StabilityAuditError, RuntimeError):
    """メタ状態モニター学習エラー"""


class TamperError(StabilityAuditError, ValueError):
    """アーティファクトの改ざん・バージョン不一致"""

    def __init__(self, message: str, field: str):
        super().__init__(f"{message} (field: {field})")
        self.field = field


class ArtifactIOError(StabilityAuditError, RuntimeError):
    """アーティファクト書き込み失敗（部分マニフェスト付き）"""

    def __init__(self, message: str, manifest_path: Optional[Path] = None):
        super().__init__(message)
        self.manifest_path = manifest_path
