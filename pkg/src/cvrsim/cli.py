"""Command-line entry points: synth, run, matrix, metrics."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .fileio import (
    FeederParseError,
    default_profiles_path,
    emit_results,
    load_feeder,
    load_profiles,
    load_scenario_file,
    read_hours_file,
    save_feeder,
)
from .inverter import MODE_PF, MODE_VOLT_VAR
from .metrics import summarize
from .scenario import (
    AllocationKind,
    ScenarioConfig,
    SynthesisParams,
    run_matrix,
    run_scenario,
    synthesize_feeder,
)

ALLOCATIONS = tuple(a.value for a in AllocationKind)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvrsim",
        description="Quasi-static CVR / solar-PV interaction studies on radial feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = SynthesisParams()
    synth = sub.add_parser("synth", help="write a synthetic feeder description file")
    synth.add_argument("--out", required=True, help="output feeder file")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--buses-per-feeder", default="80,80,79",
                       help="comma-separated bus counts (default 80,80,79)")
    synth.add_argument("--total-length-miles", type=float,
                       default=defaults.total_length_miles)
    synth.add_argument("--total-load-kw", type=float,
                       default=defaults.total_load_kw)

    def add_run_args(p):
        p.add_argument("--feeder", default="synthetic",
                       help="feeder file path, or 'synthetic' (default)")
        p.add_argument("--profiles", default="default",
                       help="profiles file path, or 'default'")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for the synthetic feeder")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing run directory")
        p.add_argument("--snapshot-hour", type=int, default=13)

    run = sub.add_parser("run", help="run a single scenario")
    add_run_args(run)
    run.add_argument("--config", help="scenario configuration JSON; flags override it")
    run.add_argument("--allocation", choices=ALLOCATIONS, default="dispersed")
    run.add_argument("--penetration", type=float, default=60.0)
    run.add_argument("--mode", choices=(MODE_PF, MODE_VOLT_VAR), default=MODE_VOLT_VAR)
    run.add_argument("--no-cvr", action="store_true", help="fix the substation at 1 p.u.")
    # flags fall back to the config file (then to built-in defaults) when unset
    run.set_defaults(feeder=None, profiles=None, seed=None, snapshot_hour=None,
                     allocation=None, penetration=None, mode=None)

    matrix = sub.add_parser("matrix", help="run an allocation/mode/CVR scenario grid")
    add_run_args(matrix)
    matrix.add_argument("--allocations", default="head,dispersed,end")
    matrix.add_argument("--modes", default="pf,vrp")
    matrix.add_argument("--cvr", choices=("on", "off", "both"), default="both")
    matrix.add_argument("--penetrations", default="60")
    matrix.add_argument("--parallel", type=int, default=1,
                        help="worker processes for independent scenarios")

    met = sub.add_parser("metrics", help="recompute summaries from stored results")
    met.add_argument("results_dir", help="directory holding *_hours.csv files")
    return parser


def _load_inputs(feeder_src: str, profiles_src: str, seed: int):
    if feeder_src == "synthetic":
        network = synthesize_feeder(SynthesisParams(seed=seed))
    else:
        network = load_feeder(feeder_src)
    profiles_path = (default_profiles_path() if profiles_src == "default"
                     else Path(profiles_src))
    load_profile, pv_profile = load_profiles(profiles_path)
    return network, load_profile, pv_profile


def _report_outcome(label: str, result) -> int:
    metrics = summarize(result)
    infeasible = len(metrics.infeasible_hours)
    print(f"{label}: energy={metrics.total_customer_energy_kwh:.1f} kWh "
          f"losses={metrics.total_line_loss_energy_kwh:.1f} kWh "
          f"mean_sub_v={metrics.mean_substation_voltage_overall:.4f} p.u. "
          f"infeasible_hours={infeasible}")
    return infeasible


def _cmd_synth(args) -> int:
    counts = tuple(int(x) for x in args.buses_per_feeder.split(","))
    params = SynthesisParams(buses_per_feeder=counts,
                             total_length_miles=args.total_length_miles,
                             total_load_kw=args.total_load_kw,
                             seed=args.seed)
    network = synthesize_feeder(params)
    save_feeder(network, args.out)
    print(f"wrote {args.out}: {len(network.buses)} buses, {len(network.lines)} lines, "
          f"{len(network.loads)} loads")
    return 0


def _cmd_run(args) -> int:
    file_cfg = load_scenario_file(args.config) if args.config else {}

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return file_cfg.get(key, default)

    seed = int(pick(args.seed, "seed", 0))
    network, load_profile, pv_profile = _load_inputs(
        pick(args.feeder, "feeder", "synthetic"),
        pick(args.profiles, "profiles", "default"), seed)
    cvr = False if args.no_cvr else bool(file_cfg.get("cvr", True))
    config = ScenarioConfig(feeder=network,
                            allocation=pick(args.allocation, "allocation", "dispersed"),
                            penetration_pct=float(pick(args.penetration,
                                                       "penetration_pct", 60.0)),
                            mode=pick(args.mode, "mode", MODE_VOLT_VAR),
                            cvr_enabled=cvr,
                            load_profile=load_profile,
                            pv_profile=pv_profile,
                            seed=seed)
    result = run_scenario(config)
    manifest = emit_results([result], args.out,
                            snapshot_hour=int(pick(args.snapshot_hour,
                                                   "snapshot_hour", 13)),
                            force=args.force, config_path=args.config)
    warnings = _report_outcome(config.label(), result)
    print(f"results in {manifest.run_dir}")
    if warnings:
        print(f"warning: {warnings} infeasible hour(s)", file=sys.stderr)
    return 0


def _cmd_matrix(args) -> int:
    network, load_profile, pv_profile = _load_inputs(args.feeder, args.profiles,
                                                     args.seed)
    cvr_states = {"on": (True,), "off": (False,), "both": (False, True)}[args.cvr]
    configs = []
    for pen in (float(x) for x in args.penetrations.split(",")):
        for alloc in args.allocations.split(","):
            for mode in args.modes.split(","):
                for cvr in cvr_states:
                    configs.append(ScenarioConfig(
                        feeder=network, allocation=alloc, penetration_pct=pen,
                        mode=mode, cvr_enabled=cvr,
                        load_profile=load_profile, pv_profile=pv_profile,
                        seed=args.seed))
    outcomes = run_matrix(configs, parallel=args.parallel)
    failures = [o for o in outcomes if not o.ok]
    warnings = 0
    results = []
    for o in outcomes:
        if o.ok:
            results.append(o.result)
            warnings += _report_outcome(o.config.label(), o.result)
        else:
            print(f"{o.config.label()}: FAILED ({o.error})", file=sys.stderr)
    if results:
        manifest = emit_results(results, args.out, snapshot_hour=args.snapshot_hour,
                                force=args.force)
        print(f"{len(results)} scenario(s) in {manifest.run_dir}")
    if warnings:
        print(f"warning: {warnings} infeasible hour(s) across the grid", file=sys.stderr)
    return 1 if failures else 0


def _cmd_metrics(args) -> int:
    results_dir = Path(args.results_dir)
    hour_files = sorted(results_dir.glob("**/*_hours.csv"))
    if not hour_files:
        print(f"no *_hours.csv files under {results_dir}", file=sys.stderr)
        return 1
    for path in hour_files:
        rows = read_hours_file(path)
        label = path.name[: -len("_hours.csv")]
        energy = sum(r["load_p_kw"] for r in rows)
        losses = sum(r["losses_kw"] for r in rows)
        sub_v = sum((r["sub_v_a"] + r["sub_v_b"] + r["sub_v_c"]) / 3 for r in rows) / len(rows)
        infeasible = sum(1 for r in rows if r["feasible"] == 0)
        print(f"{label}: energy={energy:.1f} kWh losses={losses:.1f} kWh "
              f"mean_sub_v={sub_v:.4f} p.u. infeasible_hours={infeasible}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "matrix":
            return _cmd_matrix(args)
        if args.command == "metrics":
            return _cmd_metrics(args)
    except (FeederParseError, FileExistsError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command!r}")
    return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
