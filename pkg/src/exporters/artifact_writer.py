"""
成果物ライター
テレメトリJSONL・潜在SBLT・閉ループログ・チェックポイント・マニフェストの書き出しと読み込み
"""

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import aiofiles
import numpy as np
import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from ..analyzers.meta_state import restore_latents, serialize_latents
from ..analyzers.stability_metrics import RunMetrics
from ..telemetry.records import TelemetryRecord
from ..utils.config import FORMAT_VERSION
from ..utils.errors import ArtifactIOError, TamperError


TELEMETRY_FORMAT = "sb-telemetry"
CLOSED_LOOP_FORMAT = "sb-closed-loop"
METRICS_FORMAT = "sb-metrics"
MANIFEST_FORMAT = "sb-manifest"

TELEMETRY_FILE = "telemetry.jsonl"
LATENTS_FILE = "latents.sblt"
LATENTS_CSV_FILE = "latents.csv"
CLOSED_LOOP_FILE = "closed_loop.jsonl"
METRICS_FILE = "metrics.json"
CHECKPOINT_DIR = "checkpoints"
MANIFEST_FILE = "manifest.json"


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.sbck"


def latents_frame(latents: np.ndarray, steps: List[int]) -> pd.DataFrame:
    """潜在系列の表形式（step列 + h0..h{k-1}）"""
    df = pd.DataFrame(latents, columns=[f"h{i}" for i in range(latents.shape[1])])
    df.insert(0, "step", steps)
    return df


def file_header(fmt: str, config_hash: str, **fields: Any) -> Dict[str, Any]:
    """自己記述ヘッダ（壁時計はここだけに入れる）"""
    return {
        "format": fmt,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        **fields,
        "created_at": datetime.now().isoformat(),
    }


def encode_jsonl(header: Dict[str, Any], lines: List[str]) -> str:
    body = [json.dumps(header, separators=(",", ":"), sort_keys=True)] + lines
    return "\n".join(body) + "\n"


def parse_header(line: str, fmt: str, source: str) -> Dict[str, Any]:
    """ヘッダ行の形式・バージョン検証"""
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise TamperError(f"{source}: header line is not JSON", field=f"{source}:header") from e
    if header.get("format") != fmt:
        raise TamperError(f"{source}: expected format {fmt}, got {header.get('format')}",
                          field=f"{source}:format")
    if header.get("version") != FORMAT_VERSION:
        raise TamperError(f"{source}: unsupported version {header.get('version')}",
                          field=f"{source}:version")
    return header


def parse_telemetry(text: str, source: str = TELEMETRY_FILE) -> Tuple[Dict[str, Any], List[TelemetryRecord]]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TamperError(f"{source}: empty telemetry file", field=f"{source}:header")
    header = parse_header(lines[0], TELEMETRY_FORMAT, source)
    return header, [TelemetryRecord.from_json(line) for line in lines[1:]]


def parse_closed_loop(text: str, source: str = CLOSED_LOOP_FILE) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TamperError(f"{source}: empty closed-loop log", field=f"{source}:header")
    header = parse_header(lines[0], CLOSED_LOOP_FORMAT, source)
    return header, [json.loads(line) for line in lines[1:]]


@dataclass
class RunArtifact:
    """1ラン分の成果物（ディスク上のパスと読み込み済み内容）"""
    run_dir: Path
    header: Dict[str, Any]
    records: List[TelemetryRecord]
    metrics: RunMetrics
    latents: Optional[np.ndarray] = None
    latents_hash: Optional[str] = None
    evaluations: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def run_id(self) -> str:
        return self.header["run_id"]

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]

    @property
    def telemetry_path(self) -> Path:
        return self.run_dir / TELEMETRY_FILE

    @property
    def latents_path(self) -> Optional[Path]:
        path = self.run_dir / LATENTS_FILE
        return path if path.exists() else None


def load_run_artifact(run_dir: Path) -> RunArtifact:
    """ラン成果物ディレクトリを読み込む（形式検証付き）"""
    run_dir = Path(run_dir)
    name = run_dir.name
    telemetry_path = run_dir / TELEMETRY_FILE
    metrics_path = run_dir / METRICS_FILE
    if not telemetry_path.exists() or not metrics_path.exists():
        raise ArtifactIOError(f"run directory {run_dir} is missing telemetry or metrics")

    header, records = parse_telemetry(telemetry_path.read_text(encoding="utf-8"), f"{name}/{TELEMETRY_FILE}")

    metrics_doc = json.loads(metrics_path.read_text(encoding="utf-8"))
    parse_header(json.dumps(metrics_doc.get("header", {})), METRICS_FORMAT, f"{name}/{METRICS_FILE}")
    metrics = RunMetrics.from_dict(metrics_doc["metrics"])

    latents, latents_hash = None, None
    if (run_dir / LATENTS_FILE).exists():
        latents, latents_hash = restore_latents((run_dir / LATENTS_FILE).read_bytes())

    evaluations: List[Dict[str, Any]] = []
    if (run_dir / CLOSED_LOOP_FILE).exists():
        _, evaluations = parse_closed_loop((run_dir / CLOSED_LOOP_FILE).read_text(encoding="utf-8"),
                                           f"{name}/{CLOSED_LOOP_FILE}")

    checkpoints = sorted((run_dir / CHECKPOINT_DIR).glob("*.sbck")) if (run_dir / CHECKPOINT_DIR).exists() else []
    return RunArtifact(
        run_dir=run_dir,
        header=header,
        records=records,
        metrics=metrics,
        latents=latents,
        latents_hash=latents_hash,
        evaluations=evaluations,
        checkpoints=checkpoints,
    )


class ArtifactWriter:
    """成果物ディレクトリへの非同期書き出し（OSErrorはリトライ）"""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.written: List[str] = []

    def relative(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    @retry(
        stop=stop_after_attempt(3),
        wait=wait_exponential(multiplier=0.1, min=0.1, max=1),
        retry=retry_if_exception_type(OSError),
        reraise=True,
    )
    async def _write(self, path: Path, data, mode: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        if "b" in mode:
            async with aiofiles.open(path, mode) as f:
                await f.write(data)
        else:
            async with aiofiles.open(path, mode, encoding="utf-8") as f:
                await f.write(data)

    async def write_text(self, path: Path, text: str) -> Path:
        await self._write(Path(path), text, "w")
        self._track(path)
        return Path(path)

    async def write_bytes(self, path: Path, blob: bytes) -> Path:
        await self._write(Path(path), blob, "wb")
        self._track(path)
        return Path(path)

    async def write_json(self, path: Path, payload: Any) -> Path:
        return await self.write_text(path, json.dumps(payload, indent=2, ensure_ascii=False, default=str))

    def _track(self, path: Path):
        rel = self.relative(path)
        if rel not in self.written:
            self.written.append(rel)

    async def write_run(self,
                        run_dir: Path,
                        *,
                        config_hash: str,
                        header_fields: Dict[str, Any],
                        records: List[TelemetryRecord],
                        metrics: RunMetrics,
                        latents: Optional[np.ndarray] = None,
                        evaluations: Optional[List] = None,
                        checkpoints: Optional[Dict[int, bytes]] = None,
                        latents_csv: bool = False) -> List[Path]:
        """1ラン分のファイル一式を書き出す"""
        run_dir = Path(run_dir)
        paths = [await self.write_text(
            run_dir / TELEMETRY_FILE,
            encode_jsonl(file_header(TELEMETRY_FORMAT, config_hash, **header_fields),
                         [r.to_json() for r in records]),
        )]
        if latents is not None:
            paths.append(await self.write_bytes(run_dir / LATENTS_FILE, serialize_latents(latents, config_hash)))
            if latents_csv:
                frame = latents_frame(latents, [r.step for r in records])
                paths.append(await self.write_text(run_dir / LATENTS_CSV_FILE, frame.to_csv(index=False)))
        if evaluations is not None:
            paths.append(await self.write_text(
                run_dir / CLOSED_LOOP_FILE,
                encode_jsonl(file_header(CLOSED_LOOP_FORMAT, config_hash, run_id=header_fields["run_id"]),
                             [e.to_json() for e in evaluations]),
            ))
        for step, blob in sorted((checkpoints or {}).items()):
            paths.append(await self.write_bytes(run_dir / CHECKPOINT_DIR / checkpoint_name(step), blob))
        paths.append(await self.write_json(run_dir / METRICS_FILE, {
            "header": file_header(METRICS_FORMAT, config_hash, run_id=header_fields["run_id"]),
            "metrics": metrics.to_dict(),
        }))
        return paths

    async def write_manifest(self, config_hash: str, status: str,
                             runs: List[str], error: Optional[str] = None, **extra: Any) -> Path:
        """マニフェスト（部分成果物の場合は status=partial）"""
        payload = {
            **file_header(MANIFEST_FORMAT, config_hash, status=status),
            "runs": sorted(runs),
            "files": sorted(self.written),
            **extra,
        }
        if error:
            payload["error"] = error
        path = self.root / MANIFEST_FILE
        await self._write(path, json.dumps(payload, indent=2, ensure_ascii=False, default=str), "w")
        return path


def read_manifest(artifact_dir: Path) -> Dict[str, Any]:
    path = Path(artifact_dir) / MANIFEST_FILE
    if not path.exists():
        raise ArtifactIOError(f"no {MANIFEST_FILE} in {artifact_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    parse_header(json.dumps(manifest), MANIFEST_FORMAT, MANIFEST_FILE)
    return manifest
