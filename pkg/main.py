#!/usr/bin/env python3
"""
Stability Audit - 学習安定性監査エンジン
メインCLIインターフェース
"""

import asyncio
import functools
import json
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import click
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

# プロジェクトパスを追加
sys.path.insert(0, str(Path(__file__).parent))

from src.analyzers import AuditReport, RunMetrics, aggregate
from src.core import AuditRunner, replay as replay_artifact, timing_sweep
from src.core.audit_runner import RUNS_DIR
from src.exporters import ArtifactWriter, ReportExporter, load_run_artifact, read_manifest
from src.exporters.report_exporter import EXPORT_KINDS, compare_frame, group_frame, trajectory_frame
from src.perturbations import DEFAULT_SWEEP_FRACS
from src.utils import AuditLogger, ConfigurationError, LogLevel, StabilityAuditError, TamperError
from src.utils.config import load_config

# Rich console
console = Console()

# 環境変数ロード
load_dotenv()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def async_command(f):
    """非同期コマンドデコレータ"""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        return asyncio.run(f(*args, **kwargs))
    return wrapper


def _logger(ctx, log_dir: Optional[Path]) -> Optional[AuditLogger]:
    if log_dir is None:
        return None
    return AuditLogger(log_dir, LogLevel(ctx.obj['log_level']), console_output=ctx.obj['verbose'])


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeElapsedColumn(),
        console=console,
    )


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='詳細ログ出力')
@click.option('--log-level', default='INFO', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']))
@click.pass_context
def cli(ctx, verbose, log_level):
    """Stability Audit - 学習安定性監査エンジン"""
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose
    ctx.obj['log_level'] = log_level


@cli.command()
@click.argument('config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--override', '-O', 'overrides', multiple=True, help='ドット記法の上書き（例: learner.lr=0.01）')
@click.option('--output', '-o', type=click.Path(file_okay=False, path_type=Path), help='成果物ルート')
@click.option('--jobs', '-j', default=1, show_default=True, type=click.IntRange(min=1), help='並列ラン数')
@click.option('--no-cache', is_flag=True, help='ディスク上のベースラインキャッシュを使わない')
@click.option('--log-dir', type=click.Path(file_okay=False, path_type=Path), help='ログ出力先')
@click.pass_context
@async_command
async def run(ctx, config_file: Path, overrides: Sequence[str], output: Optional[Path],
              jobs: int, no_cache: bool, log_dir: Optional[Path]):
    """監査を実行"""
    loaded = load_config(config_file, overrides)
    config = loaded.config
    console.print(f"[blue]Config:[/blue] {config_file} ([cyan]{loaded.hash}[/cyan])")
    if loaded.seed_env:
        console.print(f"[yellow]SB_SEED override:[/yellow] {loaded.seed_env}")

    total = len(config.seeds) * (1 + len(config.perturbations))
    start_time = time.time()
    with _progress() as progress:
        task = progress.add_task("Running audit...", total=total)
        runner = AuditRunner(loaded, output_dir=output, jobs=jobs, logger=_logger(ctx, log_dir),
                             use_disk_cache=not no_cache,
                             progress_callback=lambda job: progress.update(task, advance=1,
                                                                           description=job.run_id))
        result = await runner.run()

    _display_report(result.report)
    _display_final_summary({
        "Artifact": str(result.artifact_dir),
        "Runs": len(result.runs),
        "Executed": result.executed_runs,
        "Cached baselines": result.cached_runs,
        "Processing Time": f"{time.time() - start_time:.2f}s",
    })
    return EXIT_OK


@cli.command()
@click.argument('artifact_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--log-dir', type=click.Path(file_okay=False, path_type=Path), help='ログ出力先')
@click.pass_context
def replay(ctx, artifact_dir: Path, log_dir: Optional[Path]):
    """成果物の整合性検証とメトリクス再計算"""
    logger = _logger(ctx, log_dir)
    with console.status("[bold green]Replaying telemetry..."):
        result = replay_artifact(artifact_dir, logger=logger)
    if logger is not None:
        asyncio.run(logger.save_json_logs())

    if result.verified:
        console.print(f"[green]metrics verified[/green] ({len(result.runs)} runs, config {result.config_hash})")
        return EXIT_OK

    panel = Panel("\n".join(result.mismatches[:50]), title="Replay mismatches", border_style="red")
    console.print(panel)
    console.print(f"[red]{len(result.mismatches)} mismatches[/red]")
    return EXIT_VALIDATION


@cli.command()
@click.argument('config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--fracs', default=",".join(str(f) for f in DEFAULT_SWEEP_FRACS), show_default=True,
              help='注入時刻（学習進捗の割合、カンマ区切り）')
@click.option('--override', '-O', 'overrides', multiple=True, help='ドット記法の上書き')
@click.option('--output', '-o', type=click.Path(file_okay=False, path_type=Path), help='成果物ルート')
@click.option('--jobs', '-j', default=1, show_default=True, type=click.IntRange(min=1), help='並列ラン数')
@click.option('--no-cache', is_flag=True, help='ディスク上のベースラインキャッシュを使わない')
@click.option('--log-dir', type=click.Path(file_okay=False, path_type=Path), help='ログ出力先')
@click.pass_context
@async_command
async def sweep(ctx, config_file: Path, fracs: str, overrides: Sequence[str], output: Optional[Path],
                jobs: int, no_cache: bool, log_dir: Optional[Path]):
    """注入タイミングスイープ"""
    try:
        frac_values = [float(part) for part in fracs.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated fractions, got '{fracs}'", param_hint="--fracs") from e

    loaded = load_config(config_file, overrides)
    total = len(set(frac_values)) * len(loaded.config.seeds) * 2
    with _progress() as progress:
        task = progress.add_task("Running sweep...", total=total)
        result = await timing_sweep(loaded, frac_values, output_dir=output, jobs=jobs,
                                    logger=_logger(ctx, log_dir), use_disk_cache=not no_cache,
                                    progress_callback=lambda job: progress.update(task, advance=1,
                                                                                  description=job.run_id))

    table = Table(title="Timing Sweep")
    for column in ("start_frac", "t_s", "runs", "P_div", "RT mean", "RT se"):
        table.add_column(column, style="cyan" if column == "start_frac" else "green")
    for row in result.rows:
        table.add_row(f"{row['start_frac']:.2f}", str(row['t_s']), str(row['n_runs']), f"{row['p_div']:.2f}",
                      _fmt(row['rt_mean']), _fmt(row['rt_se']))
    console.print(table)
    console.print(f"[green]Sweep saved:[/green] {result.sweep_dir}")
    return EXIT_OK


@cli.command()
@click.argument('artifact_dirs', nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--output', '-o', type=click.Path(dir_okay=False, path_type=Path), help='群統計CSVの出力先')
def analyze(artifact_dirs: Sequence[Path], output: Optional[Path]):
    """ラン横断の再集計（崩壊群/非崩壊群）"""
    runs: List[RunMetrics] = []
    for artifact_dir in artifact_dirs:
        manifest = read_manifest(artifact_dir)
        for run_id in manifest["runs"]:
            runs.append(load_run_artifact(artifact_dir / RUNS_DIR / run_id).metrics)
    report = aggregate(runs, check_hash=False)

    _display_report(report)
    frame = group_frame(report)
    if output is not None:
        asyncio.run(ReportExporter(ArtifactWriter(output.parent)).export_frame(frame, output))
        console.print(f"[green]Group table saved:[/green] {output}")
    return EXIT_OK


@cli.command()
@click.argument('reports', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--output', '-o', type=click.Path(dir_okay=False, path_type=Path), help='比較CSVの出力先')
def compare(reports: Sequence[Path], output: Optional[Path]):
    """複数report.jsonの比較表"""
    documents = [json.loads(Path(p).read_text(encoding="utf-8")) for p in reports]
    frame = compare_frame(documents)

    table = Table(title="Cross-config comparison")
    for column in ("config", "learner", "perturbation", "runs", "P_div", "RT", "SIP", "MSD"):
        table.add_column(column, style="cyan" if column in ("config", "learner") else "green")
    for row in frame.to_dict(orient="records"):
        table.add_row(str(row["config_hash"]), row["learner"], row["perturbation"], str(row["n_runs"]),
                      _fmt(row["p_div"]), _fmt(row["rt_mean"]), _fmt(row["sip_mean"]), _fmt(row["msd_mean"]))
    console.print(table)
    if output is not None:
        asyncio.run(ReportExporter(ArtifactWriter(output.parent)).export_frame(frame, output))
        console.print(f"[green]Comparison saved:[/green] {output}")
    return EXIT_OK


@cli.command()
@click.argument('artifact_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--what', 'what', required=True, type=click.Choice(list(EXPORT_KINDS)))
@click.option('--output', '-o', type=click.Path(dir_okay=False, path_type=Path), help='CSV出力先')
def export(artifact_dir: Path, what: str, output: Optional[Path]):
    """プロット用CSVのエクスポート"""
    manifest = read_manifest(artifact_dir)
    artifacts = [load_run_artifact(artifact_dir / RUNS_DIR / run_id) for run_id in manifest["runs"]]
    frame = trajectory_frame(artifacts, what)
    if output is None:
        output = Path("exports") / f"{artifact_dir.name}_{what}.csv"
    asyncio.run(ReportExporter(ArtifactWriter(output.parent)).export_frame(frame, output))
    console.print(f"[green]{what} exported:[/green] {output} ({len(frame)} rows)")
    return EXIT_OK


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and value != value):
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _display_report(report: AuditReport):
    """セル別サマリ表示"""
    table = Table(title=f"Audit Report ({report.config_hash})")
    for column in ("Learner", "Perturbation", "Runs", "P_div", "Collapsed", "T_c", "RT", "SIP", "MSD"):
        table.add_column(column, style="cyan" if column in ("Learner", "Perturbation") else "green")
    for cell in report.cells:
        table.add_row(
            cell.learner, cell.perturbation, str(cell.n_runs), f"{cell.p_div:.2f}", str(cell.n_collapsed),
            *(_fmt(cell.stats[name]["mean"]) for name in
              ("collapse_time", "recovery_time", "spike_intensity", "meta_state_deviation")),
        )
    console.print(table)

    groups = Table(title="Collapse vs non-collapse (pre-collapse window)")
    for column in ("Group", "Runs", "MSD", "SIP", "x_grad drop", "Alarm before T_c"):
        groups.add_column(column, style="cyan" if column == "Group" else "green")
    for g in report.groups:
        groups.add_row(g.group, str(g.n_runs), _fmt(g.precollapse_msd_mean), _fmt(g.precollapse_sip_mean),
                       _fmt(g.xgrad_drop_ratio_mean), _fmt(g.alarm_before_collapse_fraction))
    console.print(groups)


def _display_final_summary(summary: dict):
    """最終サマリ表示"""
    panel = Panel(
        "\n".join(f"{key}: {value}" for key, value in summary.items()),
        title="Final Summary",
        border_style="green",
    )
    console.print(panel)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLIエントリポイント（終了コード: 0成功 / 1使用法 / 2検証 / 3実行時）"""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="stability-audit",
                      standalone_mode=False)
    except click.exceptions.Abort:
        console.print("[red]Aborted[/red]")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigurationError as e:
        key = f" (key: {e.key})" if e.key else ""
        console.print(f"[red]Configuration error{key}:[/red] {e}")
        return EXIT_VALIDATION
    except ValidationError as e:
        console.print(f"[red]Validation error:[/red] {e}")
        return EXIT_VALIDATION
    except TamperError as e:
        console.print(f"[red]Integrity error (field: {e.field}):[/red] {e}")
        return EXIT_VALIDATION
    except StabilityAuditError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        return EXIT_RUNTIME
    except Exception as e:
        console.print(f"[red]Runtime failure:[/red] {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
