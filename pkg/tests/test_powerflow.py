import math

import numpy as np
import pytest

from cvrsim.inverter import DEFAULT_CURVE, InverterLimits, MODE_PF, MODE_VOLT_VAR, PvUnit, \
    reactive_capability, volt_var_q
from cvrsim.kernels import compile_network, run_sweep
from cvrsim.network import FeederNetwork, Phase
from cvrsim.powerflow import (
    SolveOptions,
    TimeInputs,
    compute_losses,
    oracle_solve,
    solve_snapshot,
    solve_with_inverter_control,
)
from conftest import S1_KW, assert_power_balance, random_radial_network, \
    two_bus_network

TIGHT = SolveOptions(tolerance=1e-12, max_sweeps=500)


def closed_form_voltage(r_pu, p_pu):
    return (1.0 + math.sqrt(1.0 - 4.0 * r_pu * p_pu)) / 2.0


def test_no_load_network_is_flat():
    net, _ = random_radial_network(np.random.default_rng(0), 6, with_injections=False)
    net = FeederNetwork(net.buses, net.lines, net.transformer, net.source_bus)
    sol = solve_snapshot(net)
    assert sol.converged
    assert sol.iterations == 1
    src = sol.voltages[0]
    for i in range(len(sol.bus_ids)):
        np.testing.assert_allclose(sol.voltages[i], src, rtol=0, atol=0)
    assert sol.losses_p == 0.0
    assert sol.total_load_p == 0.0


def test_two_bus_closed_form():
    net = two_bus_network(r_pu=0.01, p_pu=1.0)
    sol = solve_snapshot(net, options=TIGHT)
    assert sol.converged
    v_star = closed_form_voltage(0.01, 1.0)
    assert abs(sol.voltage("L")[0]) == pytest.approx(v_star, abs=1e-10)
    loss_star = (1.0 / v_star) ** 2 * 0.01 * S1_KW
    assert sol.losses_p == pytest.approx(loss_star, abs=1e-8 * S1_KW)
    assert_power_balance(sol)


def test_source_voltage_follows_taps():
    net = two_bus_network(r_pu=0.01, p_pu=0.2)
    sol = solve_snapshot(net, tap_positions=(8, 0, -8))
    np.testing.assert_allclose(np.abs(sol.voltages[0]), [1.05, 1.0, 0.95], atol=1e-12)
    with pytest.raises(ValueError, match="tap"):
        solve_snapshot(net, tap_positions=(17, 0, 0))


def test_unconverged_flagged_not_raised():
    # rP beyond the solvable limit: voltage collapse
    net = two_bus_network(r_pu=0.3, p_pu=1.0)
    sol = solve_snapshot(net, options=SolveOptions(max_sweeps=50))
    assert not sol.converged


def test_sweep_matches_oracle_on_random_networks():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(10):
        net, inj = random_radial_network(rng, int(rng.integers(3, 11)))
        taps = tuple(int(t) for t in rng.integers(-10, 11, size=3))
        sweep = solve_snapshot(net, taps, inj, SolveOptions(tolerance=1e-10, max_sweeps=500))
        oracle = oracle_solve(net, taps, inj, tolerance=1e-13, max_iterations=2000)
        assert sweep.converged and oracle.converged
        dv = np.abs(sweep.voltages - oracle.voltages)[sweep.phase_mask].max()
        worst = max(worst, dv)
        assert_power_balance(sweep)
    assert worst < 1e-8


def test_oracle_matches_closed_form():
    net = two_bus_network(r_pu=0.01, p_pu=1.0)
    sol = oracle_solve(net, tolerance=1e-14, max_iterations=3000)
    assert abs(sol.voltage("L")[0]) == pytest.approx(closed_form_voltage(0.01, 1.0),
                                                     abs=1e-10)


def test_oracle_rejects_large_networks():
    rng = np.random.default_rng(1)
    net, _ = random_radial_network(rng, 30)
    with pytest.raises(ValueError, match="bus-phases"):
        oracle_solve(net)


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    net, inj = random_radial_network(rng, 9)
    a = solve_snapshot(net, (2, -1, 0), inj)
    b = solve_snapshot(net, (2, -1, 0), inj)
    assert np.array_equal(a.voltages, b.voltages)
    assert np.array_equal(a.branch_currents, b.branch_currents)
    assert a.losses_p == b.losses_p


def test_compute_losses_breakdown_and_balance_method():
    rng = np.random.default_rng(8)
    for _ in range(5):
        net, inj = random_radial_network(rng, 8)
        sol = solve_snapshot(net, fixed_injections=inj)
        total, per_line = compute_losses(sol, net)
        assert total == pytest.approx(sol.losses_p, abs=1e-9)
        assert total == pytest.approx(sum(per_line.values()), abs=1e-9)
        # independent method: power-balance residual
        balance_losses = sol.source_p + sol.total_pv_p - sol.total_load_p
        assert abs(total - balance_losses) / S1_KW < 1e-6


def test_compute_losses_rejects_unconverged():
    net = two_bus_network(r_pu=0.3, p_pu=1.0)
    sol = solve_snapshot(net, options=SolveOptions(max_sweeps=20))
    with pytest.raises(ValueError, match="converged"):
        compute_losses(sol, net)


def test_zero_current_network_has_zero_losses():
    net = two_bus_network(r_pu=0.05, p_pu=0.0)
    sol = solve_snapshot(net)
    total, per_line = compute_losses(sol, net)
    assert total == 0.0
    assert per_line == {"l1": 0.0}


def test_rising_profile_under_reverse_flow():
    # pure injection, no load, decoupled phases: voltage rises along the path
    unit = PvUnit(bus="L", phases=(Phase.A,), peak_kw=500.0,
                  limits=InverterLimits(kva=600.0), mode=MODE_PF)
    net = two_bus_network(r_pu=0.02, p_pu=0.0, pv_units=(unit,))
    sol = solve_with_inverter_control(net, (0, 0, 0), TimeInputs(0.0, 1.0))
    assert sol.converged
    assert abs(sol.voltage("L")[0]) > abs(sol.voltage("S")[0])


def test_pf_mode_single_control_pass_equals_snapshot():
    unit = PvUnit(bus="L", phases=(Phase.A,), peak_kw=100.0,
                  limits=InverterLimits(kva=120.0), mode=MODE_PF)
    net = two_bus_network(r_pu=0.02, p_pu=0.5, pv_units=(unit,))
    controlled = solve_with_inverter_control(net, (0, 0, 0), TimeInputs(1.0, 1.0))
    assert controlled.control_iterations == 1
    plain = solve_snapshot(net, fixed_injections={("L", Phase.A): (100.0, 0.0)})
    np.testing.assert_allclose(controlled.voltages, plain.voltages, atol=1e-15)
    assert controlled.total_pv_q == 0.0


def test_deadband_fixed_point_keeps_q_zero():
    unit = PvUnit(bus="L", phases=(Phase.A,), peak_kw=50.0,
                  limits=InverterLimits(kva=60.0), mode=MODE_VOLT_VAR)
    net = two_bus_network(r_pu=0.002, p_pu=0.1, pv_units=(unit,))
    sol = solve_with_inverter_control(net, (0, 0, 0), TimeInputs(1.0, 1.0))
    assert sol.converged and sol.control_converged
    assert 0.98 < abs(sol.voltage("L")[0]) < 1.02
    assert sol.total_pv_q == 0.0
    assert sol.control_iterations == 1


def test_volt_var_fixed_point_matches_bisection_oracle():
    # heavy load pulls the bus below the deadband; the inverter injects vars
    kva = 25.0 * S1_KW / 100.0  # sized so q moves the voltage visibly
    unit = PvUnit(bus="L", phases=(Phase.A,), peak_kw=0.5 * kva,
                  limits=InverterLimits(kva=kva), mode=MODE_VOLT_VAR)
    net = two_bus_network(r_pu=0.03, p_pu=1.2, x_pu=0.06, pv_units=(unit,))
    ti = TimeInputs(load_multiplier=1.0, pv_multiplier=0.5)
    sol = solve_with_inverter_control(net, (0, 0, 0), ti,
                                      SolveOptions(tolerance=1e-10, max_sweeps=500))
    assert sol.converged and sol.control_converged
    v_solved = abs(sol.voltage("L")[0])
    assert v_solved < 0.98

    p_kw = 0.5 * kva * ti.pv_multiplier  # available power at half irradiance

    def q_of_v(v):
        lo, hi = reactive_capability(unit.limits, p_kw)
        return min(max(volt_var_q(DEFAULT_CURVE, v) * kva, lo), hi)

    def network_voltage(q_kvar):
        fixed = {("L", Phase.A): (p_kw, q_kvar)}
        ref = oracle_solve(net, (0, 0, 0), fixed, tolerance=1e-14,
                           max_iterations=5000)
        assert ref.converged
        return abs(ref.voltage("L")[0])

    lo, hi = 0.80, 1.05
    for _ in range(60):  # bisection on g(v) = f(q(v)) - v
        mid = 0.5 * (lo + hi)
        if network_voltage(q_of_v(mid)) - mid > 0:
            lo = mid
        else:
            hi = mid
    v_star = 0.5 * (lo + hi)
    assert v_solved == pytest.approx(v_star, abs=1e-6)
    assert sol.total_pv_q == pytest.approx(q_of_v(v_star), abs=1e-3 * kva)


def test_control_non_convergence_reported_distinctly():
    kva = 40.0 * S1_KW / 100.0
    unit = PvUnit(bus="L", phases=(Phase.A,), peak_kw=0.5 * kva,
                  limits=InverterLimits(kva=kva), mode=MODE_VOLT_VAR)
    net = two_bus_network(r_pu=0.03, p_pu=1.2, x_pu=0.08, pv_units=(unit,))
    # undamped updates on a steep curve/network composition limit-cycle
    opts = SolveOptions(tolerance=1e-12, max_sweeps=500,
                        max_control_iterations=3, control_damping=1.0)
    sol = solve_with_inverter_control(net, (0, 0, 0), TimeInputs(1.0, 0.5), opts)
    assert sol.converged
    assert not sol.control_converged


def test_backends_agree():
    pytest.importorskip("numba")
    rng = np.random.default_rng(23)
    for _ in range(5):
        net, inj = random_radial_network(rng, 10)
        compiled = compile_network(net)
        from cvrsim.powerflow import _injection_arrays, _source_voltages

        inj_p, inj_q = _injection_arrays(compiled, inj)
        src = _source_voltages((0, 0, 0), net.transformer.oltc)
        out_nb = run_sweep(compiled, 1.0, inj_p, inj_q, src, 1e-10, 500, backend="numba")
        out_np = run_sweep(compiled, 1.0, inj_p, inj_q, src, 1e-10, 500, backend="numpy")
        assert out_nb[4] and out_np[4]
        assert np.abs(out_nb[0] - out_np[0]).max() < 1e-12
        assert np.abs(out_nb[1] - out_np[1]).max() < 1e-12


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tolerance=0.0)
    with pytest.raises(ValueError):
        SolveOptions(max_sweeps=0)
    with pytest.raises(ValueError):
        SolveOptions(control_damping=0.0)
    with pytest.raises(ValueError):
        TimeInputs(pv_multiplier=1.5)
    with pytest.raises(ValueError):
        TimeInputs(load_multiplier=-0.1)


def test_injection_validation():
    net = two_bus_network(r_pu=0.01, p_pu=0.1)
    with pytest.raises(ValueError, match="unknown bus"):
        solve_snapshot(net, fixed_injections={("NOPE", Phase.A): (1.0, 0.0)})
    with pytest.raises(ValueError, match="absent phase"):
        solve_snapshot(net, fixed_injections={("L", Phase.B): (1.0, 0.0)})
