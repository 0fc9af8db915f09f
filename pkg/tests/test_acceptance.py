"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with ``pytest -s`` or in the
captured-output section on failure).  The directional checks run the full
allocation/mode/CVR grid on the bundled synthetic feeder once per session.
"""

import math
import time

import numpy as np
import pytest

from cvrsim.inverter import DEFAULT_CURVE, InverterLimits, KVAR_FRACTION, \
    reactive_capability, volt_var_q
from cvrsim.metrics import cvr_factor, loss_energy, mean_substation_voltage, \
    total_energy, voltage_distribution
from cvrsim.network import Phase
from cvrsim.powerflow import SolveOptions, oracle_solve, solve_snapshot
from cvrsim.scenario import ScenarioConfig, run_scenario
from cvrsim.zipload import ZipLoad, evaluate, sensitivity
from cvrsim.fileio import emit_results

from conftest import S1_KW, assert_power_balance, random_radial_network, \
    two_bus_network
from test_metrics import _lumped_load_network
from test_oltc import _enumerate_minimal_taps

PV_PEAK_HOUR = 13


def _report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")
    assert ok, f"{name}{suffix}"


@pytest.fixture(scope="module")
def grid(default_feeder):
    """The 12-run allocation/mode/CVR grid plus the penetration sweep."""
    # warm the JIT before the timed section
    run_scenario(ScenarioConfig(feeder=default_feeder, penetration_pct=0.0,
                                cvr_enabled=False))
    results = {}
    t0 = time.perf_counter()
    for alloc in ("head", "dispersed", "end"):
        for mode in ("pf", "vrp"):
            for cvr in (False, True):
                cfg = ScenarioConfig(feeder=default_feeder, allocation=alloc,
                                     penetration_pct=60.0, mode=mode,
                                     cvr_enabled=cvr)
                results[(alloc, mode, cvr)] = run_scenario(cfg)
    elapsed = time.perf_counter() - t0
    sweep = {}
    for pen in (30.0, 60.0, 100.0):
        for cvr in (False, True):
            cfg = ScenarioConfig(feeder=default_feeder, allocation="dispersed",
                                 penetration_pct=pen, mode="vrp", cvr_enabled=cvr)
            sweep[(pen, cvr)] = (results[("dispersed", "vrp", cvr)]
                                 if pen == 60.0 else run_scenario(cfg))
    return results, sweep, elapsed


def test_criterion_1_solver_vs_oracle():
    rng = np.random.default_rng(42)
    cases = []
    for _ in range(50):
        net, inj = random_radial_network(rng, int(rng.integers(3, 11)))
        taps = tuple(int(t) for t in rng.integers(-10, 11, size=3))
        cases.append((net, inj, taps))
    # compile everything (and the JIT) outside the timed region
    warm = solve_snapshot(cases[0][0], cases[0][2], cases[0][1])
    assert warm.converged

    options = SolveOptions(tolerance=1e-10, max_sweeps=500)
    worst = 0.0
    t0 = time.perf_counter()
    solutions = []
    for net, inj, taps in cases:
        sweep = solve_snapshot(net, taps, inj, options)
        oracle = oracle_solve(net, taps, inj, tolerance=1e-13, max_iterations=2000)
        assert sweep.converged and oracle.converged
        worst = max(worst, float(np.abs(sweep.voltages - oracle.voltages)
                                 [sweep.phase_mask].max()))
        solutions.append(sweep)
    elapsed = time.perf_counter() - t0
    test_criterion_1_solver_vs_oracle.solutions = solutions
    _report("1 solver-vs-oracle", worst < 1e-8 and elapsed < 5.0,
            f"max |dV| {worst:.2e} p.u., {elapsed:.2f} s")


def test_criterion_2_closed_form_two_bus():
    net = two_bus_network(r_pu=0.01, p_pu=1.0)
    sol = solve_snapshot(net, options=SolveOptions(tolerance=1e-12, max_sweeps=500))
    v_star = (1.0 + math.sqrt(1.0 - 4.0 * 0.01 * 1.0)) / 2.0
    loss_star_pu = (1.0 / v_star) ** 2 * 0.01
    dv = abs(abs(sol.voltage("L")[0]) - v_star)
    dl = abs(sol.losses_p / S1_KW - loss_star_pu)
    _report("2 closed-form", sol.converged and dv < 1e-8 and dl < 1e-8,
            f"V {abs(sol.voltage('L')[0]):.6f} (ref {v_star:.6f}), "
            f"loss {sol.losses_p / S1_KW:.6f} p.u. (ref {loss_star_pu:.6f})")


def test_criterion_3_power_balance(grid):
    results, _, _ = grid
    worst = 0.0
    rng = np.random.default_rng(7)
    for _ in range(20):
        net, inj = random_radial_network(rng, int(rng.integers(3, 11)))
        sol = solve_snapshot(net, fixed_injections=inj)
        assert_power_balance(sol)
        worst = max(worst, abs(sol.power_balance_residual()) / S1_KW)
    for result in results.values():
        for h in result.hours:
            residual = abs(h.source_p_kw + h.pv_p_kw - h.load_p_kw
                           - h.losses_kw) / S1_KW
            worst = max(worst, residual)
    _report("3 power-balance", worst < 1e-6, f"worst residual {worst:.2e} p.u.")


def test_criterion_4_zip_exactness():
    rng = np.random.default_rng(5)
    exact = True
    worst_rel = 0.0
    h = 1e-6
    for _ in range(100):
        zp = rng.uniform(0, 1)
        ip = rng.uniform(0, 1 - zp)
        load = ZipLoad("b", Phase.A, p0=rng.uniform(1, 500), q0=rng.uniform(0, 200),
                       zp=zp, ip=ip, pp=1 - zp - ip, zq=zp, iq=ip, pq=1 - zp - ip,
                       v0=rng.uniform(0.9, 1.1))
        p, q = evaluate(load, load.v0)
        exact = exact and p == load.p0 and q == load.q0
        v = rng.uniform(0.85, 1.15)
        numeric = (evaluate(load, v + h)[0] - evaluate(load, v - h)[0]) / (2 * h)
        analytic = sensitivity(load, v)
        if numeric != 0:
            worst_rel = max(worst_rel, abs(analytic - numeric) / abs(numeric))
    _report("4 zip-exactness", exact and worst_rel < 1e-6,
            f"rated-point exact: {exact}, dP/dV rel err {worst_rel:.2e}")


def test_criterion_5_volt_var_conformance():
    corners_ok = all(
        volt_var_q(DEFAULT_CURVE, v) == q
        for v, q in ((0.92, 0.44), (0.98, 0.0), (1.02, 0.0), (1.08, -0.44))
    )
    grid_v = np.arange(0.85, 1.15 + 1e-9, 1e-3)
    values = [volt_var_q(DEFAULT_CURVE, v) for v in grid_v]
    monotone = all(b <= a + 1e-15 for a, b in zip(values, values[1:]))

    rng = np.random.default_rng(12)
    clipping_ok = True
    limits = InverterLimits(kva=10.0)
    for _ in range(500):
        p = rng.uniform(0, 10.0)
        v = rng.uniform(0.85, 1.15)
        q_min, q_max = reactive_capability(limits, p)
        q = min(max(volt_var_q(DEFAULT_CURVE, v) * 10.0, q_min), q_max)
        cap = min(KVAR_FRACTION * 10.0, math.sqrt(max(100.0 - p * p, 0.0)))
        clipping_ok = clipping_ok and abs(q) <= cap + 1e-12
    _report("5 volt-var", corners_ok and monotone and clipping_ok,
            f"corners {corners_ok}, monotone {monotone}, clip {clipping_ok}")


def test_criterion_6_tap_minimality():
    from cvrsim.oltc import select_minimal_taps
    from cvrsim.powerflow import TimeInputs

    rng = np.random.default_rng(101)
    nets = [random_radial_network(rng, int(rng.integers(4, 9)),
                                  with_injections=False)[0] for _ in range(20)]
    select_minimal_taps(nets[0], TimeInputs(1.0, 0.0))  # warm the JIT

    all_ok = True
    t0 = time.perf_counter()
    for net in nets:
        sel = select_minimal_taps(net, TimeInputs(1.0, 0.0))
        feasible, minimal = _enumerate_minimal_taps(net)
        ok = sel.feasible and sel.taps in minimal
        # band membership of the returned solution, re-verified directly
        vm = np.abs(sel.solution.voltages)[sel.solution.phase_mask]
        ok = ok and vm.min() >= 0.95 - 1e-9 and vm.max() <= 1.05 + 1e-9
        all_ok = all_ok and ok
    elapsed = time.perf_counter() - t0
    _report("6 tap-minimality", all_ok and elapsed < 30.0,
            f"20 networks, {elapsed:.1f} s")


def test_criterion_7_directional_reproduction(grid):
    results, sweep, elapsed = grid
    checks: list[tuple[str, bool]] = []

    sub = {k: mean_substation_voltage(r)[1] for k, r in results.items()}
    energy = {k: total_energy(r) for k, r in results.items()}
    losses = {k: loss_energy(r) for k, r in results.items()}

    feasible_everywhere = all(not r.infeasible_hours for r in results.values())
    checks.append(("all hours feasible", feasible_everywhere))

    for mode in ("pf", "vrp"):
        checks.append((f"7a sub D<H {mode}",
                       sub[("dispersed", mode, True)] < sub[("head", mode, True)]))
        checks.append((f"7a sub D<E {mode}",
                       sub[("dispersed", mode, True)] < sub[("end", mode, True)]))

    for mode in ("pf", "vrp"):
        d = voltage_distribution(results[("dispersed", mode, False)], PV_PEAK_HOUR)
        h = voltage_distribution(results[("head", mode, False)], PV_PEAK_HOUR)
        e = voltage_distribution(results[("end", mode, False)], PV_PEAK_HOUR)
        checks.append((f"7b spread D<H {mode}", d.spread < h.spread))
        checks.append((f"7b spread D<E {mode}", d.spread < e.spread))
        checks.append((f"7b mean D highest {mode}",
                       d.mean > h.mean and d.mean > e.mean))
        dc = voltage_distribution(results[("dispersed", mode, True)], PV_PEAK_HOUR)
        hc = voltage_distribution(results[("head", mode, True)], PV_PEAK_HOUR)
        ec = voltage_distribution(results[("end", mode, True)], PV_PEAK_HOUR)
        checks.append((f"7b mean D lowest with CVR {mode}",
                       dc.mean < hc.mean and dc.mean < ec.mean))

    for mode in ("pf", "vrp"):
        checks.append((f"7c energy D lowest {mode}",
                       energy[("dispersed", mode, True)] < energy[("head", mode, True)]
                       and energy[("dispersed", mode, True)] < energy[("end", mode, True)]))
    checks.append(("7c cvr saves energy everywhere",
                   all(energy[(a, m, True)] < energy[(a, m, False)]
                       for a in ("head", "dispersed", "end")
                       for m in ("pf", "vrp"))))

    for mode in ("pf", "vrp"):
        for cvr in (False, True):
            checks.append((f"7d losses D lowest {mode} cvr={cvr}",
                           losses[("dispersed", mode, cvr)] < losses[("head", mode, cvr)]
                           and losses[("dispersed", mode, cvr)] < losses[("end", mode, cvr)]))

    d_gap_e = energy[("dispersed", "vrp", True)] - energy[("dispersed", "pf", True)]
    d_gap_l = losses[("dispersed", "vrp", True)] - losses[("dispersed", "pf", True)]
    checks.append(("7e vrp<=pf under dispersed", d_gap_e <= 0 and d_gap_l <= 0))
    for alloc in ("head", "end"):
        gap_e = energy[(alloc, "vrp", True)] - energy[(alloc, "pf", True)]
        gap_l = losses[(alloc, "vrp", True)] - losses[(alloc, "pf", True)]
        checks.append((f"7e gap smaller under {alloc}",
                       abs(gap_e) < abs(d_gap_e) and abs(gap_l) < abs(d_gap_l)))

    subs = [mean_substation_voltage(sweep[(pen, True)])[1] for pen in (30.0, 60.0, 100.0)]
    checks.append(("7f sub non-increasing in penetration",
                   subs[0] >= subs[1] >= subs[2]))
    energies = [total_energy(sweep[(pen, False)]) for pen in (30.0, 60.0, 100.0)]
    checks.append(("7f energy non-decreasing without cvr",
                   energies[0] <= energies[1] <= energies[2]))

    checks.append(("grid under 5 minutes", elapsed < 300.0))
    failed = [name for name, ok in checks if not ok]
    _report("7 directional", not failed,
            f"{len(checks)} checks, grid {elapsed:.1f} s"
            + (f"; failed: {failed}" if failed else ""))


def test_criterion_8_cvr_factor_sanity():
    net = _lumped_load_network()
    common = dict(feeder=net, penetration_pct=0.0,
                  load_profile=(1.0,) * 24, pv_profile=(0.0,) * 24)
    base = run_scenario(ScenarioConfig(cvr_enabled=False, **common))
    cvr = run_scenario(ScenarioConfig(cvr_enabled=True, **common))
    factor = cvr_factor(base, cvr)
    _report("8 cvr-factor", abs(factor - 1.3) <= 0.05, f"factor {factor:.4f}")


def test_criterion_9_deterministic_result_files(tmp_path, default_feeder):
    cfg = dict(allocation="dispersed", penetration_pct=60.0, mode="vrp",
               cvr_enabled=True)
    r1 = run_scenario(ScenarioConfig(feeder=default_feeder, **cfg))
    r2 = run_scenario(ScenarioConfig(feeder=default_feeder, **cfg))
    m1 = emit_results([r1], tmp_path / "a")
    m2 = emit_results([r2], tmp_path / "b")
    identical = [d1 for _, d1 in m1.files] == [d2 for _, d2 in m2.files]
    for (name, _), (name2, _) in zip(m1.files, m2.files):
        identical = identical and (m1.run_dir / name).read_bytes() == \
            (m2.run_dir / name2).read_bytes()
    identical = identical and (m1.run_dir / "manifest.json").read_bytes() == \
        (m2.run_dir / "manifest.json").read_bytes()
    _report("9 determinism", identical,
            f"{len(m1.files)} files byte-identical")
