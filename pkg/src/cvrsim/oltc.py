"""Substation OLTC model and the two-rule CVR tap selection.

Rule 1: the tap changer operates per phase.  Rule 2: taps are driven as low
as possible while every bus-phase voltage stays inside the allowed band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import DEFAULT_OLTC, OltcConfig, tap_to_ratio  # noqa: F401 (module surface)
from .powerflow import (
    PowerFlowSolution,
    SolveOptions,
    TimeInputs,
    solve_with_inverter_control,
)


@dataclass(frozen=True)
class CvrConstraints:
    """Voltage band enforced network-wide, per phase."""

    v_min: float = 0.95
    v_max: float = 1.05
    tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")


DEFAULT_CONSTRAINTS = CvrConstraints()

_MAX_PASSES = 10


@dataclass(eq=False)
class TapSelection:
    taps: tuple[int, int, int]
    solution: PowerFlowSolution
    feasible: bool
    failed_probes: tuple[tuple[int, int, int], ...] = ()


@dataclass(eq=False)
class TimestepResult:
    taps: tuple[int, int, int]
    solution: PowerFlowSolution
    feasible: bool
    cvr_enabled: bool


def constraint_violation(solution: PowerFlowSolution, constraints: CvrConstraints) -> float:
    """Worst band violation (p.u.) over all present bus-phases; 0 if none."""
    vm = np.abs(solution.voltages)[solution.phase_mask]
    low = float(np.max(constraints.v_min - vm, initial=0.0))
    high = float(np.max(vm - constraints.v_max, initial=0.0))
    return max(low, high, 0.0)


def is_feasible(solution: PowerFlowSolution, constraints: CvrConstraints) -> bool:
    if not (solution.converged and solution.control_converged):
        return False
    return constraint_violation(solution, constraints) <= constraints.tolerance


def select_minimal_taps(network,
                        time_inputs: TimeInputs,
                        options: SolveOptions | None = None,
                        oltc: OltcConfig | None = None,
                        constraints: CvrConstraints | None = None) -> TapSelection:
    """Lowest per-phase taps that keep the whole network inside the band.

    Starting from the highest feasible uniform tap vector, all phases first
    descend in lockstep while the re-solved network stays feasible (pure
    per-phase descent from the top of the band strands the lagging phases
    behind coupling-induced imbalance limits).  Phases are then polished in
    A, B, C order, lowering each tap one step at a time while the network
    remains feasible, until a full pass makes no change (at most 10 passes).
    The result is elementwise minimal: no single phase can be lowered one
    more step.  When no uniform vector is feasible the search reports
    infeasibility and returns the uniform vector with the smallest
    worst-case violation (ties resolved toward the higher tap).

    A probed tap whose solve does not converge is treated as infeasible and
    recorded in ``failed_probes``.
    """
    options = options or SolveOptions()
    oltc = oltc or network.transformer.oltc
    constraints = constraints or DEFAULT_CONSTRAINTS
    failed: list[tuple[int, int, int]] = []

    def probe(taps: tuple[int, int, int]):
        sol = solve_with_inverter_control(network, taps, time_inputs, options, oltc=oltc)
        if not (sol.converged and sol.control_converged):
            failed.append(taps)
            return sol, False, math.inf
        viol = constraint_violation(sol, constraints)
        return sol, viol <= constraints.tolerance, viol

    # The source-bus magnitude equals the tap ratio exactly, so ratios outside
    # the band can be rejected without solving.
    def ratio_in_band(tap: int) -> bool:
        r = tap_to_ratio(oltc, tap)
        return (constraints.v_min - constraints.tolerance
                <= r <= constraints.v_max + constraints.tolerance)

    start = None
    best_sol = None
    for t in range(oltc.max_tap, oltc.min_tap - 1, -1):
        if not ratio_in_band(t):
            if tap_to_ratio(oltc, t) < constraints.v_min:
                break
            continue
        sol, ok, _ = probe((t, t, t))
        if ok:
            start = [t, t, t]
            best_sol = sol
            break

    if start is not None:
        # lockstep descent of all phases together
        t = start[0]
        while t > oltc.min_tap:
            if not ratio_in_band(t - 1):
                break
            sol, ok, _ = probe((t - 1, t - 1, t - 1))
            if not ok:
                break
            t -= 1
            start = [t, t, t]
            best_sol = sol

    if start is None:
        # no feasible uniform vector: fall back to the least-violating one
        best = None
        for t in range(oltc.min_tap, oltc.max_tap + 1):
            sol, _, viol = probe((t, t, t))
            key = (viol, -t)
            if best is None or key < best[0]:
                best = (key, (t, t, t), sol)
        return TapSelection(best[1], best[2], False, tuple(failed))

    taps = start
    for _ in range(_MAX_PASSES):
        changed = False
        for ph in range(3):
            while taps[ph] > oltc.min_tap:
                cand = taps.copy()
                cand[ph] -= 1
                if tap_to_ratio(oltc, cand[ph]) < constraints.v_min - constraints.tolerance:
                    break
                sol, ok, _ = probe(tuple(cand))
                if not ok:
                    break
                taps = cand
                best_sol = sol
                changed = True
        if not changed:
            break
    return TapSelection(tuple(taps), best_sol, True, tuple(failed))


def run_timestep(network,
                 time_inputs: TimeInputs,
                 cvr_enabled: bool,
                 options: SolveOptions | None = None,
                 oltc: OltcConfig | None = None,
                 constraints: CvrConstraints | None = None) -> TimestepResult:
    """One quasi-static step: fixed neutral taps without CVR, minimal-tap
    search with it."""
    options = options or SolveOptions()
    oltc = oltc or network.transformer.oltc
    if not cvr_enabled:
        sol = solve_with_inverter_control(network, (0, 0, 0), time_inputs, options, oltc=oltc)
        feasible = sol.converged and sol.control_converged
        return TimestepResult((0, 0, 0), sol, feasible, False)
    selection = select_minimal_taps(network, time_inputs, options, oltc, constraints)
    return TimestepResult(selection.taps, selection.solution, selection.feasible, True)
