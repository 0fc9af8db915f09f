"""Unbalanced radial power flow with voltage-dependent loads and inverters.

The production path is a backward/forward ladder sweep over the compiled
network (see :mod:`cvrsim.kernels`); :func:`oracle_solve` is an independent
dense nodal-admittance solver used to cross-check it on small networks.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from .inverter import MODE_VOLT_VAR, available_active_power
from .kernels import SOURCE_ANGLES, CompiledNetwork, compile_network, run_sweep
from .network import FeederNetwork, OltcConfig, Phase, require_radial, tap_to_ratio

InjectionMap = "dict[tuple[str, Phase | str], tuple[float, float]]"


@dataclass(frozen=True)
class SolveOptions:
    """Tolerances and iteration caps for the snapshot and control loops."""

    tolerance: float = 1e-6
    max_sweeps: int = 100
    max_control_iterations: int = 50
    control_damping: float = 0.5

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_sweeps < 1 or self.max_control_iterations < 1:
            raise ValueError("iteration caps must be at least 1")
        if not 0 < self.control_damping <= 1:
            raise ValueError("control damping must lie in (0, 1]")


DEFAULT_OPTIONS = SolveOptions()


@dataclass(frozen=True)
class TimeInputs:
    """Per-hour drivers: load scaling and irradiance fraction."""

    load_multiplier: float = 1.0
    pv_multiplier: float = 0.0

    def __post_init__(self) -> None:
        if self.load_multiplier < 0:
            raise ValueError("load multiplier must be non-negative")
        if not 0.0 <= self.pv_multiplier <= 1.0:
            raise ValueError("pv multiplier must lie in [0, 1]")


@dataclass(eq=False)
class PowerFlowSolution:
    """Converged state of one time step.

    Voltages and currents are complex per-unit; powers are kW/kvar.
    ``source_injection`` holds kW + j*kvar per phase at the substation.
    """

    bus_ids: tuple[str, ...]
    line_ids: tuple[str, ...]
    phase_mask: np.ndarray
    voltages: np.ndarray
    branch_currents: np.ndarray
    total_load_p: float
    total_load_q: float
    total_pv_p: float
    total_pv_q: float
    losses_p: float
    source_injection: np.ndarray
    iterations: int
    converged: bool
    taps: tuple[int, int, int] = (0, 0, 0)
    load_multiplier: float = 1.0
    control_iterations: int = 1
    control_converged: bool = True
    load_p_per_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pv_p_per_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    loss_per_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    load_q_per_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pv_q_per_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def bus_index(self) -> dict[str, int]:
        cached = self.__dict__.get("_bus_index")
        if cached is None:
            cached = {b: i for i, b in enumerate(self.bus_ids)}
            self.__dict__["_bus_index"] = cached
        return cached

    def voltage(self, bus_id: str) -> np.ndarray:
        """Complex per-phase voltage of one bus."""
        return self.voltages[self.bus_index[bus_id]]

    def voltage_magnitudes(self) -> np.ndarray:
        """|V| per bus-phase; absent phases hold NaN."""
        vm = np.abs(self.voltages)
        return np.where(self.phase_mask, vm, np.nan)

    @property
    def v_min(self) -> float:
        return float(np.abs(self.voltages)[self.phase_mask].min())

    @property
    def v_max(self) -> float:
        return float(np.abs(self.voltages)[self.phase_mask].max())

    @property
    def source_p(self) -> float:
        return float(self.source_injection.real.sum())

    @property
    def source_q(self) -> float:
        return float(self.source_injection.imag.sum())

    def power_balance_residual(self) -> float:
        """source + pv - load - losses in kW (should be ~0 when converged)."""
        return self.source_p + self.total_pv_p - self.total_load_p - self.losses_p


def _source_voltages(taps: tuple[int, int, int], oltc: OltcConfig) -> np.ndarray:
    taps = tuple(int(t) for t in taps)
    if len(taps) != 3:
        raise ValueError("tap_positions must hold one tap per phase")
    ratios = np.array([tap_to_ratio(oltc, t) for t in taps])
    return ratios * SOURCE_ANGLES


def _injection_arrays(compiled: CompiledNetwork, fixed_injections) -> tuple[np.ndarray, np.ndarray]:
    inj_p, inj_q = compiled.zero_injections()
    if fixed_injections:
        for (bus, phase), (p_kw, q_kvar) in fixed_injections.items():
            idx = compiled.bus_index.get(bus)
            if idx is None:
                raise ValueError(f"injection references unknown bus {bus!r}")
            ph = Phase.parse(phase)
            if not compiled.phase_mask[idx, ph.index]:
                raise ValueError(f"injection at bus {bus!r} uses absent phase {ph.name}")
            inj_p[idx, ph.index] += p_kw / compiled.s_base_1ph_kw
            inj_q[idx, ph.index] += q_kvar / compiled.s_base_1ph_kw
    return inj_p, inj_q


def _assemble_solution(compiled: CompiledNetwork, v, i_br, i_src, sweeps, converged,
                       inj_p, inj_q, load_scale, taps) -> PowerFlowSolution:
    s1 = compiled.s_base_1ph_kw
    vm = np.abs(v)
    load_p = load_scale * (compiled.a2p * vm * vm + compiled.a1p * vm + compiled.a0p)
    load_q = load_scale * (compiled.a2q * vm * vm + compiled.a1q * vm + compiled.a0q)
    load_p_ph = load_p.sum(axis=0) * s1
    load_q_ph = load_q.sum(axis=0) * s1
    pv_p_ph = inj_p.sum(axis=0) * s1
    pv_q_ph = inj_q.sum(axis=0) * s1
    if compiled.n_line:
        drop = np.einsum("lij,lj->li", compiled.z_pu, i_br)
        loss_ph = (np.conj(i_br) * drop).real.sum(axis=0) * s1
    else:
        loss_ph = np.zeros(3)
    source = v[0] * np.conj(i_src) * s1
    return PowerFlowSolution(
        bus_ids=compiled.bus_ids,
        line_ids=compiled.line_ids,
        phase_mask=compiled.phase_mask,
        voltages=v,
        branch_currents=i_br,
        total_load_p=float(load_p_ph.sum()),
        total_load_q=float(load_q_ph.sum()),
        total_pv_p=float(pv_p_ph.sum()),
        total_pv_q=float(pv_q_ph.sum()),
        losses_p=float(loss_ph.sum()),
        source_injection=source,
        iterations=int(sweeps),
        converged=bool(converged),
        taps=tuple(int(t) for t in taps),
        load_multiplier=load_scale,
        load_p_per_phase=load_p_ph,
        pv_p_per_phase=pv_p_ph,
        loss_per_phase=loss_ph,
        load_q_per_phase=load_q_ph,
        pv_q_per_phase=pv_q_ph,
    )


def solve_snapshot(network: FeederNetwork,
                   tap_positions: tuple[int, int, int] = (0, 0, 0),
                   fixed_injections=None,
                   options: SolveOptions | None = None,
                   load_multiplier: float = 1.0,
                   oltc: OltcConfig | None = None) -> PowerFlowSolution:
    """Backward/forward sweep solve of one snapshot.

    Loads are re-evaluated from the latest voltage iterate each sweep;
    ``fixed_injections`` maps (bus, phase) to injected (kW, kvar), positive
    into the grid.  Returns converged=False with the last iterate when the
    sweep cap is exhausted.
    """
    options = options or DEFAULT_OPTIONS
    oltc = oltc or network.transformer.oltc
    compiled = compile_network(network)
    src_v = _source_voltages(tap_positions, oltc)
    inj_p, inj_q = _injection_arrays(compiled, fixed_injections)
    v, i_br, i_src, sweeps, converged = run_sweep(
        compiled, load_multiplier, inj_p, inj_q, src_v,
        options.tolerance, options.max_sweeps,
    )
    return _assemble_solution(compiled, v, i_br, i_src, sweeps, converged,
                              inj_p, inj_q, load_multiplier, tap_positions)


def _solve_compiled(compiled, load_scale, inj_p, inj_q, src_v, options, taps):
    v, i_br, i_src, sweeps, converged = run_sweep(
        compiled, load_scale, inj_p, inj_q, src_v,
        options.tolerance, options.max_sweeps,
    )
    return _assemble_solution(compiled, v, i_br, i_src, sweeps, converged,
                              inj_p, inj_q, load_scale, taps)


@dataclass(eq=False)
class _PvLayout:
    """Flattened unit-to-bus-phase indexing plus vectorized limit arrays."""

    rows: np.ndarray          # bus index per (unit, phase) slot
    cols: np.ndarray          # phase column per slot
    offsets: np.ndarray       # slot offsets per unit, length n_units + 1
    inv_phases: np.ndarray    # 1 / phase count per unit
    kva: np.ndarray
    pmin_no_vars: np.ndarray  # percent thresholds
    pmin_kvar_max: np.ndarray
    kvar_max: np.ndarray
    kvar_max_abs: np.ndarray
    vrp: np.ndarray           # indices of volt-var units
    curve_groups: list        # (unit indices, curve voltages, curve q)


_pv_layouts: "weakref.WeakKeyDictionary[FeederNetwork, _PvLayout]" = weakref.WeakKeyDictionary()


def _pv_layout(network: FeederNetwork, compiled: CompiledNetwork) -> _PvLayout:
    layout = _pv_layouts.get(network)
    if layout is not None:
        return layout
    units = network.pv_units
    rows, cols, offsets = [], [], [0]
    for u in units:
        rows.extend(compiled.bus_index[u.bus] for _ in u.phases)
        cols.extend(ph.index for ph in u.phases)
        offsets.append(len(rows))
    vrp = np.array([i for i, u in enumerate(units) if u.mode == MODE_VOLT_VAR],
                   dtype=np.int64)
    groups: dict[tuple, list[int]] = {}
    for i in vrp:
        groups.setdefault(units[i].curve.points, []).append(int(i))
    curve_groups = []
    for points, idx in groups.items():
        xs = np.array([p[0] for p in points])
        qs = np.array([p[1] for p in points])
        curve_groups.append((np.array(idx, dtype=np.int64), xs, qs))
    layout = _PvLayout(
        rows=np.array(rows, dtype=np.int64),
        cols=np.array(cols, dtype=np.int64),
        offsets=np.array(offsets, dtype=np.int64),
        inv_phases=np.array([1.0 / len(u.phases) for u in units]),
        kva=np.array([u.limits.kva for u in units]),
        pmin_no_vars=np.array([u.limits.pmin_no_vars_pct for u in units]),
        pmin_kvar_max=np.array([u.limits.pmin_kvar_max_pct for u in units]),
        kvar_max=np.array([u.limits.kvar_max for u in units]),
        kvar_max_abs=np.array([u.limits.kvar_max_abs for u in units]),
        vrp=vrp,
        curve_groups=curve_groups,
    )
    _pv_layouts[network] = layout
    return layout


def _capability_bounds(layout: _PvLayout, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized version of :func:`cvrsim.inverter.reactive_capability`."""
    p_pct = 100.0 * p / layout.kva
    ramp = layout.pmin_kvar_max - layout.pmin_no_vars
    scale = np.where(
        ramp > 0,
        np.clip((p_pct - layout.pmin_no_vars) / np.where(ramp > 0, ramp, 1.0), 0.0, 1.0),
        1.0,
    )
    scale = np.where(p_pct < layout.pmin_no_vars, 0.0, scale)
    circle = np.sqrt(np.maximum(layout.kva * layout.kva - p * p, 0.0))
    return -np.minimum(scale * layout.kvar_max_abs, circle), \
        np.minimum(scale * layout.kvar_max, circle)


def solve_with_inverter_control(network: FeederNetwork,
                                tap_positions: tuple[int, int, int],
                                time_inputs: TimeInputs,
                                options: SolveOptions | None = None,
                                oltc: OltcConfig | None = None) -> PowerFlowSolution:
    """Snapshot solve with the volt-var feedback loop closed.

    Available PV power is fixed once per call (updating the cut-in/cut-out
    state); the reactive commands are then relaxed with damping until the
    largest per-unit change falls below tolerance * kVA.  Constant-PF units
    bypass the loop.  Control non-convergence is reported separately from
    inner-solve failure via ``control_converged``.
    """
    options = options or DEFAULT_OPTIONS
    oltc = oltc or network.transformer.oltc
    compiled = compile_network(network)
    src_v = _source_voltages(tap_positions, oltc)

    units = network.pv_units
    layout = _pv_layout(network, compiled)
    p_avail = np.array([available_active_power(u, time_inputs.pv_multiplier)
                        for u in units])
    q_state = np.zeros(len(units))

    def build_injections():
        inj_p, inj_q = compiled.zero_injections()
        if len(units):
            counts = np.diff(layout.offsets)
            scale = layout.inv_phases / compiled.s_base_1ph_kw
            np.add.at(inj_p, (layout.rows, layout.cols),
                      np.repeat(p_avail * scale, counts))
            np.add.at(inj_q, (layout.rows, layout.cols),
                      np.repeat(q_state * scale, counts))
        return inj_p, inj_q

    inj_p, inj_q = build_injections()
    sol = _solve_compiled(compiled, time_inputs.load_multiplier, inj_p, inj_q,
                          src_v, options, tap_positions)
    vrp = layout.vrp
    if vrp.size == 0 or not sol.converged:
        return sol

    q_min, q_max = _capability_bounds(layout, p_avail)
    for it in range(2, options.max_control_iterations + 1):
        vm = np.abs(sol.voltages)
        slot_v = vm[layout.rows, layout.cols]
        v_term = np.add.reduceat(slot_v, layout.offsets[:-1]) * layout.inv_phases
        target = np.zeros(len(units))
        for idx, xs, qs in layout.curve_groups:
            target[idx] = np.interp(v_term[idx], xs, qs) * layout.kva[idx]
        target = np.minimum(np.maximum(target, q_min), q_max)
        dq = target[vrp] - q_state[vrp]
        worst = float(np.max(np.abs(dq) / layout.kva[vrp]))
        if worst < options.tolerance:
            sol.control_iterations = it - 1
            return sol
        q_state[vrp] += options.control_damping * dq
        inj_p, inj_q = build_injections()
        sol = _solve_compiled(compiled, time_inputs.load_multiplier, inj_p, inj_q,
                              src_v, options, tap_positions)
        sol.control_iterations = it
        if not sol.converged:
            return sol
    sol.control_converged = False
    return sol


MAX_ORACLE_BUS_PHASES = 50


def oracle_solve(network: FeederNetwork,
                 tap_positions: tuple[int, int, int] = (0, 0, 0),
                 fixed_injections=None,
                 load_multiplier: float = 1.0,
                 oltc: OltcConfig | None = None,
                 tolerance: float = 1e-12,
                 max_iterations: int = 500,
                 damping: float = 1.0) -> PowerFlowSolution:
    """Independent dense nodal-admittance solution for small networks.

    Assembles the full admittance system from the line impedances and runs a
    damped current-injection fixed point with direct dense solves.  Meant as
    a test oracle; capped at 50 bus-phases.
    """
    require_radial(network)
    oltc = oltc or network.transformer.oltc
    bus_map = network.bus_map
    node_of: dict[tuple[str, int], int] = {}
    nodes: list[tuple[str, int]] = []
    for b in network.buses:
        for ph in b.phases:
            node_of[(b.id, ph.index)] = len(nodes)
            nodes.append((b.id, ph.index))
    n_nodes = len(nodes)
    if n_nodes > MAX_ORACLE_BUS_PHASES:
        raise ValueError(
            f"oracle limited to {MAX_ORACLE_BUS_PHASES} bus-phases, got {n_nodes}"
        )

    s1_w = network.s_base_1ph_kw * 1000.0
    Y = np.zeros((n_nodes, n_nodes), dtype=np.complex128)
    for line in network.lines:
        pattern = line.phase_pattern()
        z_base = bus_map[line.to_bus].base_voltage ** 2 / s1_w
        z = line.z_total()[np.ix_(pattern, pattern)] / z_base
        if line.length == 0:
            raise ValueError(f"oracle cannot stamp zero-impedance line {line.id}")
        y = np.linalg.inv(z)
        fi = [node_of[(line.from_bus, p)] for p in pattern]
        ti = [node_of[(line.to_bus, p)] for p in pattern]
        Y[np.ix_(fi, fi)] += y
        Y[np.ix_(ti, ti)] += y
        Y[np.ix_(fi, ti)] -= y
        Y[np.ix_(ti, fi)] -= y

    src_v3 = _source_voltages(tap_positions, oltc)
    src_nodes = [node_of[(network.source_bus, ph.index)]
                 for ph in bus_map[network.source_bus].phases]
    unknown = [i for i in range(n_nodes) if i not in set(src_nodes)]

    # per-node load polynomials and fixed injections, per-unit
    a2p = np.zeros(n_nodes)
    a1p = np.zeros(n_nodes)
    a0p = np.zeros(n_nodes)
    a2q = np.zeros(n_nodes)
    a1q = np.zeros(n_nodes)
    a0q = np.zeros(n_nodes)
    s1_kw = network.s_base_1ph_kw
    for load in network.loads:
        i = node_of[(load.bus, load.phase.index)]
        v0 = load.v0
        a2p[i] += load.p0 * load.zp / (v0 * v0) / s1_kw
        a1p[i] += load.p0 * load.ip / v0 / s1_kw
        a0p[i] += load.p0 * load.pp / s1_kw
        a2q[i] += load.q0 * load.zq / (v0 * v0) / s1_kw
        a1q[i] += load.q0 * load.iq / v0 / s1_kw
        a0q[i] += load.q0 * load.pq / s1_kw
    inj = np.zeros(n_nodes, dtype=np.complex128)
    if fixed_injections:
        for (bus, phase), (p_kw, q_kvar) in fixed_injections.items():
            ph = Phase.parse(phase)
            key = (bus, ph.index)
            if key not in node_of:
                raise ValueError(f"injection at unknown bus-phase {bus!r}/{ph.name}")
            inj[node_of[key]] += (p_kw + 1j * q_kvar) / s1_kw

    v = np.empty(n_nodes, dtype=np.complex128)
    for i, (bus, ph) in enumerate(nodes):
        v[i] = src_v3[ph]
    v_src = v[src_nodes].copy()

    Yuu = Y[np.ix_(unknown, unknown)]
    Yus = Y[np.ix_(unknown, src_nodes)]
    rhs_src = Yus @ v_src
    lu = None
    try:
        import scipy.linalg as sla

        lu = sla.lu_factor(Yuu)
    except ImportError:  # pragma: no cover - scipy is a test-time convenience
        pass

    iterations = 0
    converged = n_nodes == len(src_nodes)
    for iterations in range(1, max_iterations + 1):
        vm = np.abs(v)
        s_net = inj - load_multiplier * (
            (a2p * vm * vm + a1p * vm + a0p)
            + 1j * (a2q * vm * vm + a1q * vm + a0q)
        )
        i_inj = np.conj(s_net / v)
        rhs = i_inj[unknown] - rhs_src
        if lu is not None:
            v_new = sla.lu_solve(lu, rhs)
        else:
            v_new = np.linalg.solve(Yuu, rhs)
        delta = np.abs(v_new - v[unknown]).max() if unknown else 0.0
        v[unknown] = v[unknown] + damping * (v_new - v[unknown])
        if delta < tolerance:
            converged = True
            break

    # map back onto (n,3) arrays matching the compiled ordering
    compiled = compile_network(network)
    v_full = np.empty((compiled.n_bus, 3), dtype=np.complex128)
    v_full[:] = src_v3
    for (bus, ph), i in node_of.items():
        v_full[compiled.bus_index[bus], ph] = v[i]
    i_br = np.zeros((compiled.n_line, 3), dtype=np.complex128)
    for k, lid in enumerate(compiled.line_ids):
        z = compiled.z_pu[k]
        pattern = [p for p in range(3) if abs(z[p, p]) > 0]
        if not pattern:
            continue
        zs = z[np.ix_(pattern, pattern)]
        dv = (v_full[compiled.f_idx[k]] - v_full[compiled.t_idx[k]])[pattern]
        i_br[k, pattern] = np.linalg.solve(zs, dv)
    i_src = np.zeros(3, dtype=np.complex128)
    for k in range(compiled.n_line):
        if compiled.f_idx[k] == 0:
            i_src += i_br[k]
    # any load at the source bus draws directly from the transformer
    vm0 = np.abs(v_full[0])
    p0 = load_multiplier * (compiled.a2p[0] * vm0 * vm0 + compiled.a1p[0] * vm0 + compiled.a0p[0])
    q0 = load_multiplier * (compiled.a2q[0] * vm0 * vm0 + compiled.a1q[0] * vm0 + compiled.a0q[0])
    s0 = p0 + 1j * q0
    nz = s0 != 0
    i_src[nz] += np.conj(s0[nz] / v_full[0][nz])

    inj_p, inj_q = _injection_arrays(compiled, fixed_injections)
    return _assemble_solution(compiled, v_full, i_br, i_src, iterations, converged,
                              inj_p, inj_q, load_multiplier, tap_positions)


def compute_losses(solution: PowerFlowSolution, network: FeederNetwork) -> tuple[float, dict[str, float]]:
    """Total and per-line series losses (kW) of a converged solution.

    Per line the loss is Re(I^H Z I) over the coupled phases; the total must
    match the power-balance residual method within tolerance.
    """
    if not solution.converged:
        raise ValueError("losses are only defined for a converged solution")
    compiled = compile_network(network)
    if compiled.line_ids != solution.line_ids:
        raise ValueError("solution does not belong to this network")
    per_line: dict[str, float] = {}
    total = 0.0
    s1 = compiled.s_base_1ph_kw
    for k, lid in enumerate(compiled.line_ids):
        i = solution.branch_currents[k]
        loss = float((np.conj(i) @ (compiled.z_pu[k] @ i)).real) * s1
        per_line[lid] = loss
        total += loss
    return total, per_line
