"""
ランジョブキュー
ラン計画の進捗管理と並列実行制御（セマフォ + ワーカースレッド）
"""

import asyncio
import json
from dataclasses import asdict, dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional

import aiofiles
import pandas as pd


class JobStatus(Enum):
    """ジョブ状態"""
    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    ERROR = "error"
    SKIPPED = "skipped"


@dataclass
class RunJob:
    """ラン実行ジョブ"""
    run_id: str
    kind: str
    seed: int
    status: JobStatus = JobStatus.PENDING
    created_at: str = ""
    started_at: Optional[str] = None
    completed_at: Optional[str] = None
    error_message: Optional[str] = None
    diverged: bool = False
    cached: bool = False

    def __post_init__(self):
        if not self.created_at:
            self.created_at = datetime.now().isoformat()


class JobQueue:
    """ランジョブキューマネージャー"""

    def __init__(self, progress_file: Optional[Path] = None):
        self.jobs: List[RunJob] = []
        self.progress_file = progress_file
        self._save_lock = asyncio.Lock()

    def add_job(self, run_id: str, kind: str, seed: int) -> RunJob:
        """ジョブを追加"""
        if self.get_job(run_id) is not None:
            raise ValueError(f"duplicate run id: {run_id}")
        job = RunJob(run_id=run_id, kind=kind, seed=seed)
        self.jobs.append(job)
        return job

    def get_pending_jobs(self) -> List[RunJob]:
        return [job for job in self.jobs if job.status == JobStatus.PENDING]

    def get_jobs_by_status(self, status: JobStatus) -> List[RunJob]:
        return [job for job in self.jobs if job.status == status]

    def get_job(self, run_id: str) -> Optional[RunJob]:
        for job in self.jobs:
            if job.run_id == run_id:
                return job
        return None

    async def update_job_status(self, run_id: str, status: JobStatus,
                                error_message: Optional[str] = None, **fields):
        """ジョブ状態を更新"""
        job = self.get_job(run_id)
        if not job:
            return

        job.status = status
        if status == JobStatus.PROCESSING:
            job.started_at = datetime.now().isoformat()
        elif status in (JobStatus.COMPLETED, JobStatus.ERROR, JobStatus.SKIPPED):
            job.completed_at = datetime.now().isoformat()
        if error_message:
            job.error_message = error_message
        for key, value in fields.items():
            setattr(job, key, value)

        await self.save_progress()

    def get_progress_summary(self) -> Dict[str, Any]:
        """進捗サマリを取得"""
        total = len(self.jobs)
        status_counts = {status.value: len(self.get_jobs_by_status(status)) for status in JobStatus}
        completed = status_counts.get("completed", 0)
        return {
            "total": total,
            **status_counts,
            "diverged": sum(1 for job in self.jobs if job.diverged),
            "progress": round(completed / total * 100, 2) if total else 0,
        }

    def to_records(self) -> List[Dict[str, Any]]:
        records = []
        for job in sorted(self.jobs, key=lambda j: j.run_id):
            data = asdict(job)
            data["status"] = job.status.value
            records.append(data)
        return records

    async def save_progress(self):
        """進捗をファイルに保存"""
        if self.progress_file is None:
            return
        progress_data = {
            "jobs": self.to_records(),
            "summary": self.get_progress_summary(),
            "last_updated": datetime.now().isoformat(),
        }
        async with self._save_lock:
            async with aiofiles.open(self.progress_file, "w", encoding="utf-8") as f:
                await f.write(json.dumps(progress_data, indent=2, ensure_ascii=False))

    def export_results_csv(self, output_file: Path) -> Path:
        """ジョブ一覧をCSVにエクスポート"""
        pd.DataFrame(self.to_records()).to_csv(output_file, index=False, encoding='utf-8')
        return output_file


class JobProcessor:
    """ジョブ並列処理管理"""

    def __init__(self, max_concurrent: int = 1):
        self.max_concurrent = max(1, max_concurrent)
        self.semaphore = asyncio.Semaphore(self.max_concurrent)

    async def process_jobs(self,
                           job_queue: JobQueue,
                           processor_func: Callable[[RunJob], Awaitable[Any]]) -> Dict[str, Any]:
        """未処理ジョブを並列処理（結果はrun_idキーの辞書）"""
        pending = job_queue.get_pending_jobs()
        if not pending:
            return {}

        outcomes = await asyncio.gather(
            *(self._process_single_job(job, job_queue, processor_func) for job in pending),
            return_exceptions=True,
        )

        results: Dict[str, Any] = {}
        first_error: Optional[BaseException] = None
        for job, outcome in zip(pending, outcomes):
            if isinstance(outcome, BaseException):
                first_error = first_error or outcome
            elif outcome is not None:
                results[job.run_id] = outcome
        if first_error is not None:
            raise first_error
        return results

    async def _process_single_job(self, job: RunJob, job_queue: JobQueue,
                                  processor_func: Callable[[RunJob], Awaitable[Any]]):
        """単一ジョブを処理"""
        async with self.semaphore:
            try:
                await job_queue.update_job_status(job.run_id, JobStatus.PROCESSING)
                result = await processor_func(job)
                if result is None:
                    # 処理側で除外されたジョブ
                    await job_queue.update_job_status(job.run_id, JobStatus.SKIPPED)
                    return None
                await job_queue.update_job_status(
                    job.run_id, JobStatus.COMPLETED, diverged=bool(getattr(result, "diverged", False))
                )
                return result
            except Exception as e:
                await job_queue.update_job_status(job.run_id, JobStatus.ERROR, str(e))
                raise
