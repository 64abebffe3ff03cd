import json

import pandas as pd

from main import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main


def _single_artifact(root):
    dirs = [p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists()]
    assert len(dirs) == 1
    return dirs[0]


def test_run_then_replay(tmp_path, write_config, small_raw, capsys):
    out = tmp_path / "out"
    assert main(["run", str(write_config(small_raw)), "-o", str(out), "--no-cache"]) == EXIT_OK
    artifact = _single_artifact(out)

    capsys.readouterr()
    assert main(["replay", str(artifact)]) == EXIT_OK
    assert "metrics verified" in capsys.readouterr().out


def test_replay_reports_mismatch(tmp_path, write_config, small_raw):
    out = tmp_path / "out"
    main(["run", str(write_config(small_raw)), "-o", str(out), "--no-cache"])
    artifact = _single_artifact(out)
    path = artifact / "runs" / "baseline_s0" / "telemetry.jsonl"
    lines = path.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[10])
    record["update_norm"] = record["update_norm"] + 1.0
    lines[10] = json.dumps(record, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    assert main(["replay", str(artifact)]) == EXIT_VALIDATION


def test_unknown_config_key_exits_with_validation_code(tmp_path, write_config, small_raw, capsys):
    code = main(["run", str(write_config(small_raw)), "-O", "learner.bogus=1", "-o", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert "learner.bogus" in capsys.readouterr().out


def test_usage_errors(tmp_path):
    assert main(["run", str(tmp_path / "absent.yaml")]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["sweep", str(tmp_path), "--fracs", "a,b"]) == EXIT_USAGE


def test_seed_environment_is_recorded(tmp_path, write_config, small_raw, monkeypatch):
    monkeypatch.setenv("SB_SEED", "3")
    out = tmp_path / "out"
    assert main(["run", str(write_config(small_raw)), "-o", str(out), "--no-cache"]) == EXIT_OK
    manifest = json.loads((_single_artifact(out) / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["sb_seed"] == "3"
    assert manifest["runs"] == ["baseline_s3", "p0_lr-spike_s3"]


def test_export_analyze_and_compare(tmp_path, write_config, small_raw):
    out = tmp_path / "out"
    main(["run", str(write_config(small_raw)), "-o", str(out), "--no-cache"])
    artifact = _single_artifact(out)

    channels = tmp_path / "channels.csv"
    assert main(["export", str(artifact), "--what", "channels", "-o", str(channels)]) == EXIT_OK
    frame = pd.read_csv(channels)
    assert len(frame) == 4 * 120
    assert {"run_id", "seed", "x_gen", "x_inst", "x_grad", "x_mem"} <= set(frame.columns)

    groups = tmp_path / "groups.csv"
    assert main(["analyze", str(artifact), "-o", str(groups)]) == EXIT_OK
    assert set(pd.read_csv(groups)["group"]) == {"collapse", "non-collapse"}

    compared = tmp_path / "compare.csv"
    assert main(["compare", str(artifact / "report.json"), "-o", str(compared)]) == EXIT_OK
    assert len(pd.read_csv(compared)) == 2


def test_sweep_command(tmp_path, write_config, small_raw):
    code = main(["sweep", str(write_config(small_raw)), "--fracs", "0.3,0.5", "-o", str(tmp_path / "sw"),
                 "--no-cache"])
    assert code == EXIT_OK
    sweep_dirs = list((tmp_path / "sw").glob("*_sweep_*"))
    assert len(sweep_dirs) == 1
    assert list(pd.read_csv(sweep_dirs[0] / "sweep.csv")["start_frac"]) == [0.3, 0.5]
