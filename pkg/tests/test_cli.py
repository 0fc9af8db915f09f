import json

import pytest

from cvrsim.cli import main
from cvrsim.fileio import load_feeder, save_feeder
from cvrsim.scenario import SynthesisParams, synthesize_feeder


@pytest.fixture
def small_feeder_file(tmp_path):
    net = synthesize_feeder(SynthesisParams(buses_per_feeder=(6, 5, 5), seed=2))
    path = tmp_path / "feeder.txt"
    save_feeder(net, path)
    return path


def _run(argv):
    try:
        return main(argv)
    except SystemExit as exc:  # argparse errors
        return exc.code


def test_unknown_subcommand_usage_error(capsys):
    rc = _run(["frobnicate"])
    assert rc not in (0, None)
    assert "usage" in capsys.readouterr().err.lower()


def test_no_subcommand_usage_error():
    assert _run([]) not in (0, None)


def test_synth_writes_loadable_feeder(tmp_path, capsys):
    out = tmp_path / "feeder.txt"
    rc = _run(["synth", "--out", str(out), "--seed", "4",
               "--buses-per-feeder", "8,7,6"])
    assert rc == 0
    net = load_feeder(out)
    assert len(net.buses) == 22
    assert "22 buses" in capsys.readouterr().out


def test_run_single_scenario(small_feeder_file, tmp_path, capsys):
    out = tmp_path / "results"
    rc = _run(["run", "--feeder", str(small_feeder_file), "--out", str(out),
               "--allocation", "dispersed", "--penetration", "60",
               "--mode", "vrp"])
    assert rc == 0
    run_dirs = list(out.glob("run_*"))
    assert len(run_dirs) == 1
    files = sorted(p.name for p in run_dirs[0].iterdir())
    assert "manifest.json" in files
    assert any(f.endswith("_hours.csv") for f in files)
    stdout = capsys.readouterr().out
    assert "dispersed_vrp_cvr_p60" in stdout


def test_run_refuses_existing_without_force(small_feeder_file, tmp_path, capsys):
    out = tmp_path / "results"
    args = ["run", "--feeder", str(small_feeder_file), "--out", str(out)]
    assert _run(args) == 0
    assert _run(args) == 1
    assert "already exists" in capsys.readouterr().err
    assert _run(args + ["--force"]) == 0


def test_run_missing_feeder_file_fails(tmp_path, capsys):
    rc = _run(["run", "--feeder", str(tmp_path / "nope.txt"),
               "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "error" in capsys.readouterr().err.lower()


def test_matrix_full_grid(small_feeder_file, tmp_path, capsys):
    out = tmp_path / "grid"
    rc = _run(["matrix", "--feeder", str(small_feeder_file), "--out", str(out),
               "--penetrations", "60"])
    assert rc == 0
    run_dir = next(out.glob("run_*"))
    summaries = sorted(p.name for p in run_dir.glob("*_summary.txt"))
    assert len(summaries) == 12  # 3 allocations x 2 modes x cvr on/off
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert len(manifest["files"]) == 36


def test_metrics_recomputes_from_stored_results(small_feeder_file, tmp_path, capsys):
    out = tmp_path / "results"
    assert _run(["run", "--feeder", str(small_feeder_file), "--out", str(out)]) == 0
    capsys.readouterr()
    rc = _run(["metrics", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "energy=" in stdout and "mean_sub_v=" in stdout


def test_metrics_empty_dir_fails(tmp_path, capsys):
    rc = _run(["metrics", str(tmp_path)])
    assert rc == 1


def test_run_with_config_file(small_feeder_file, tmp_path, capsys):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({
        "format": "cvrsim-scenario", "version": 1,
        "feeder": str(small_feeder_file), "allocation": "head",
        "penetration_pct": 30, "mode": "pf", "cvr": False,
    }))
    out = tmp_path / "results"
    rc = _run(["run", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    assert "head_pf_nocvr_p30" in capsys.readouterr().out
    manifest = json.loads(next(out.glob("run_*/manifest.json")).read_text())
    assert manifest["config_path"] == str(cfg)


def test_flags_override_config_file(small_feeder_file, tmp_path, capsys):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({
        "format": "cvrsim-scenario", "version": 1,
        "feeder": str(small_feeder_file), "allocation": "head", "cvr": True,
    }))
    rc = _run(["run", "--config", str(cfg), "--allocation", "end", "--no-cvr",
               "--out", str(tmp_path / "r")])
    assert rc == 0
    assert "end_vrp_nocvr_p60" in capsys.readouterr().out


def test_bad_config_file_fails(tmp_path, capsys):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"format": "cvrsim-scenario", "version": 1,
                               "alloc": "head"}))
    rc = _run(["run", "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "unknown key" in capsys.readouterr().err
