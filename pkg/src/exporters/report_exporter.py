"""
監査レポート生成・エクスポート機能
report.json / report.csv / report.md、タイミングスイープ表、プロット用CSVの作成
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from jinja2 import Environment

from .artifact_writer import ArtifactWriter, RunArtifact, file_header, latents_frame
from ..analyzers.meta_state import MONITOR_CHANNELS
from ..analyzers.stability_metrics import AuditReport


REPORT_FORMAT = "sb-report"
SWEEP_FORMAT = "sb-sweep"

REPORT_COLUMNS = ["learner", "perturbation", "seed", "T_c", "RT", "R_rec", "SIP", "MSD", "P_div"]
SWEEP_COLUMNS = ["start_frac", "t_s", "n_runs", "p_div", "rt_mean", "rt_se", "config_hash", "artifact_dir"]
EXPORT_KINDS = ("trajectories", "channels", "latents")


class ReportTemplate:
    """Markdownレポートテンプレート"""

    AUDIT_REPORT_TEMPLATE = """# 安定性監査レポート: {{ name }}

## 基本情報
- **設定ハッシュ**: `{{ config_hash }}`
- **作成日時**: {{ created_at }}
- **ラン数**: {{ report.runs | length }}
- **t_max**: {{ report.t_max }}

## セル別サマリ

| 学習器 | 摂動 | ラン | P_div | 崩壊 | T_c | RT | R_rec | SIP | MSD |
|---|---|---|---|---|---|---|---|---|---|
{% for c in report.cells -%}
| {{ c.learner }} | {{ c.perturbation }} | {{ c.n_runs }} | {{ c.p_div | num }} | {{ c.n_collapsed }} | {{ c.stats.collapse_time | stat }} | {{ c.stats.recovery_time | stat }} | {{ c.stats.recovery_rate | stat }} | {{ c.stats.spike_intensity | stat }} | {{ c.stats.meta_state_deviation | stat }} |
{% endfor %}
## 崩壊群 / 非崩壊群（崩壊前固定ウィンドウ）

| 群 | ラン | MSD | SIP | x_grad 低下比 | κ超過が崩壊前 |
|---|---|---|---|---|---|
{% for g in report.groups -%}
| {{ g.group }} | {{ g.n_runs }} | {{ g.precollapse_msd_mean | num }} | {{ g.precollapse_sip_mean | num }} | {{ g.xgrad_drop_ratio_mean | num }} | {{ g.alarm_before_collapse_fraction | num }} |
{% endfor %}
## ラン一覧

| run_id | seed | 摂動 | t_s | T_c | RT | SIP | MSD | 発散 | 閉ループ発火 |
|---|---|---|---|---|---|---|---|---|---|
{% for r in report.runs -%}
| {{ r.run_id }} | {{ r.seed }} | {{ r.perturbation }} | {{ r.t_s }} | {{ r.collapse_time | num }} | {{ r.recovery_time | num }} | {{ r.spike_intensity | num }} | {{ r.meta_state_deviation | num }} | {{ "yes" if r.diverged else "no" }} | {{ r.activations }} |
{% endfor %}
"""


def _num(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _stat(entry: Optional[Dict[str, Any]]) -> str:
    if not entry or entry.get("mean") is None:
        return "-"
    return f"{entry['mean']:.4g} ± {entry['se']:.2g}"


def report_frame(report: AuditReport) -> pd.DataFrame:
    """ラン単位のプロット用テーブル（P_divはセル値）"""
    p_div = {(c.learner, c.perturbation): c.p_div for c in report.cells}
    rows = [{
        "learner": r.learner,
        "perturbation": r.perturbation,
        "seed": r.seed,
        "T_c": r.collapse_time,
        "RT": r.recovery_time,
        "R_rec": r.recovery_rate,
        "SIP": r.spike_intensity,
        "MSD": r.meta_state_deviation,
        "P_div": p_div[(r.learner, r.perturbation)],
    } for r in report.runs]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def sweep_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    ordered = sorted(rows, key=lambda row: row["start_frac"])
    return pd.DataFrame(ordered, columns=SWEEP_COLUMNS)


def trajectory_frame(artifacts: Sequence[RunArtifact], what: str) -> pd.DataFrame:
    """プロット用の長形式テーブル"""
    if what not in EXPORT_KINDS:
        raise ValueError(f"unknown export kind '{what}', expected one of {', '.join(EXPORT_KINDS)}")
    frames = []
    for artifact in sorted(artifacts, key=lambda a: a.run_id):
        if what == "latents":
            if artifact.latents is None:
                continue
            df = latents_frame(artifact.latents, [r.step for r in artifact.records])
        else:
            df = pd.DataFrame([r.to_dict() for r in artifact.records])
            if what == "trajectories":
                df = df[["step", "J", "loss", "perturb_active", "diverged"]]
            else:
                df = df[["step", *MONITOR_CHANNELS]]
        df.insert(0, "perturbation", artifact.header.get("perturbation"))
        df.insert(0, "seed", artifact.header.get("seed"))
        df.insert(0, "run_id", artifact.run_id)
        frames.append(df)
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def compare_frame(documents: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """複数report.jsonのセル横断比較"""
    rows = []
    for doc in documents:
        report = doc["report"]
        for cell in report["cells"]:
            rows.append({
                "config_hash": report["config_hash"],
                "name": doc.get("header", {}).get("name"),
                "learner": cell["learner"],
                "perturbation": cell["perturbation"],
                "n_runs": cell["n_runs"],
                "p_div": cell["p_div"],
                "rt_mean": cell["stats"]["recovery_time"]["mean"],
                "sip_mean": cell["stats"]["spike_intensity"]["mean"],
                "msd_mean": cell["stats"]["meta_state_deviation"]["mean"],
            })
    return pd.DataFrame(rows)


def group_frame(report: AuditReport) -> pd.DataFrame:
    return pd.DataFrame([{
        "group": g.group,
        "n_runs": g.n_runs,
        "precollapse_msd": g.precollapse_msd_mean,
        "precollapse_sip": g.precollapse_sip_mean,
        "xgrad_drop_ratio": g.xgrad_drop_ratio_mean,
        "alarm_before_collapse": g.alarm_before_collapse_fraction,
    } for g in report.groups])


class ReportExporter:
    """レポートエクスポーター"""

    def __init__(self, writer: ArtifactWriter):
        self.writer = writer
        self.jinja_env = Environment(autoescape=False, trim_blocks=False)
        self.jinja_env.filters["num"] = _num
        self.jinja_env.filters["stat"] = _stat

    def render_markdown(self, report: AuditReport, name: str, header: Dict[str, Any]) -> str:
        template = self.jinja_env.from_string(ReportTemplate.AUDIT_REPORT_TEMPLATE)
        return template.render(report=report, name=name,
                               config_hash=report.config_hash, created_at=header["created_at"])

    async def export_report(self, report: AuditReport, name: str, directory: Optional[Path] = None) -> List[Path]:
        """report.json / report.csv / report.md を書き出す"""
        directory = Path(directory or self.writer.root)
        header = file_header(REPORT_FORMAT, report.config_hash, name=name)
        return [
            await self.writer.write_json(directory / "report.json", {"header": header, "report": report.to_dict()}),
            await self.writer.write_text(directory / "report.csv", report_frame(report).to_csv(index=False)),
            await self.writer.write_text(directory / "report.md", self.render_markdown(report, name, header)),
        ]

    async def export_sweep(self, rows: Sequence[Dict[str, Any]], spec_label: str) -> List[Path]:
        """sweep.json / sweep.csv（start_frac昇順）"""
        frame = sweep_frame(rows)
        hashes = sorted({row["config_hash"] for row in rows})
        header = file_header(SWEEP_FORMAT, ",".join(hashes), perturbation=spec_label)
        return [
            await self.writer.write_json(self.writer.root / "sweep.json",
                                         {"header": header, "rows": frame.to_dict(orient="records")}),
            await self.writer.write_text(self.writer.root / "sweep.csv", frame.to_csv(index=False)),
        ]

    async def export_frame(self, frame: pd.DataFrame, path: Path) -> Path:
        return await self.writer.write_text(path, frame.to_csv(index=False))
