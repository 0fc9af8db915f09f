"""PV generation and smart-inverter reactive power behavior.

Covers the two control modes studied: constant unity power factor and
voltage-reactive-power (volt-var) droop, plus the reactive capability
envelope of a Category B interconnection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import Phase, parse_phases

MODE_PF = "pf"
MODE_VOLT_VAR = "vrp"
MODES = (MODE_PF, MODE_VOLT_VAR)

# Reactive limit of a Category B unit as a fraction of nameplate kVA.
KVAR_FRACTION = 0.44


@dataclass(frozen=True)
class VoltVarCurve:
    """Piecewise-linear volt-var characteristic.

    Four (voltage p.u., q fraction of kVA) corner points with a deadband
    between the middle pair.  Positive q injects reactive power.
    """

    points: tuple[tuple[float, float], ...] = (
        (0.92, 0.44),
        (0.98, 0.0),
        (1.02, 0.0),
        (1.08, -0.44),
    )
    v_ref: float = 1.0
    v_l: float = 0.9
    v_h: float = 1.1

    def __post_init__(self) -> None:
        pts = tuple((float(v), float(q)) for v, q in self.points)
        if len(pts) != 4:
            raise ValueError("volt-var curve needs exactly four points")
        (v1, q1), (v2, q2), (v3, q3), (v4, q4) = pts
        if not (v1 < v2 <= v3 < v4):
            raise ValueError("curve voltages must satisfy V1 < V2 <= V3 < V4")
        if not (q1 >= q2 == q3 == 0.0 >= q4):
            raise ValueError("curve must inject below the deadband and absorb above it")
        object.__setattr__(self, "points", pts)


DEFAULT_CURVE = VoltVarCurve()


@dataclass(frozen=True)
class InverterLimits:
    """Capability envelope parameters; thresholds are percent of nameplate.

    kvar_max/kvar_max_abs are fixed at 0.44 * kVA.
    """

    kva: float
    cut_in_pct: float = 5.0
    cut_out_pct: float = 5.0
    pmin_no_vars_pct: float = 5.0
    pmin_kvar_max_pct: float = 20.0
    kvar_max: float = field(init=False)
    kvar_max_abs: float = field(init=False)

    def __post_init__(self) -> None:
        if self.kva <= 0:
            raise ValueError("kva must be positive")
        if not 0 <= self.cut_out_pct <= self.cut_in_pct:
            raise ValueError("cut-out must be between 0 and cut-in")
        if self.pmin_no_vars_pct > self.pmin_kvar_max_pct:
            raise ValueError("pmin_no_vars must not exceed pmin_kvar_max")
        object.__setattr__(self, "kvar_max", KVAR_FRACTION * self.kva)
        object.__setattr__(self, "kvar_max_abs", KVAR_FRACTION * self.kva)


@dataclass(eq=False)
class PvUnit:
    """PV generator behind an inverter.

    Multi-phase units produce balanced output split equally across the listed
    phases.  `online` is the cut-in/cut-out hysteresis state and is the only
    mutable field; each time-series run must own its units exclusively.
    """

    bus: str
    phases: tuple[Phase, ...]
    peak_kw: float
    limits: InverterLimits
    mode: str = MODE_PF
    curve: VoltVarCurve = DEFAULT_CURVE
    online: bool = False

    def __post_init__(self) -> None:
        self.phases = parse_phases(self.phases)
        if self.mode not in MODES:
            raise ValueError(f"unknown inverter mode {self.mode!r}; expected one of {MODES}")
        if self.peak_kw < 0:
            raise ValueError("peak_kw must be non-negative")
        if self.peak_kw > self.limits.kva * (1 + 1e-12):
            raise ValueError(
                f"peak_kw {self.peak_kw} exceeds nameplate kVA {self.limits.kva}"
            )

    @property
    def kva(self) -> float:
        return self.limits.kva


def available_active_power(unit: PvUnit, irradiance_multiplier: float) -> float:
    """Active power (kW) available at the given irradiance fraction.

    Applies cut-in/cut-out hysteresis on output relative to nameplate: an
    offline unit starts once output reaches cut-in, an online unit stops once
    output falls strictly below cut-out.  Updates the unit's online state.
    """
    if not 0.0 <= irradiance_multiplier <= 1.0:
        raise ValueError("irradiance multiplier must lie in [0, 1]")
    raw = unit.peak_kw * irradiance_multiplier
    pct = 100.0 * raw / unit.limits.kva
    if unit.online:
        if pct < unit.limits.cut_out_pct:
            unit.online = False
    else:
        if pct >= unit.limits.cut_in_pct:
            unit.online = True
    return raw if unit.online else 0.0


def reactive_capability(limits: InverterLimits, p: float) -> tuple[float, float]:
    """(q_min, q_max) kvar available at active output p (kW).

    Zero below pmin_no_vars, ramping linearly to the full 0.44*kVA limit at
    pmin_kvar_max, and always clipped by the apparent-power circle.
    """
    if p < -1e-12 or p > limits.kva * (1 + 1e-12):
        raise ValueError(f"active power {p} outside [0, {limits.kva}]")
    p = min(max(p, 0.0), limits.kva)
    p_pct = 100.0 * p / limits.kva
    if p_pct < limits.pmin_no_vars_pct:
        return 0.0, 0.0
    if p_pct < limits.pmin_kvar_max_pct:
        scale = (p_pct - limits.pmin_no_vars_pct) / (
            limits.pmin_kvar_max_pct - limits.pmin_no_vars_pct
        )
    else:
        scale = 1.0
    circle = math.sqrt(max(limits.kva * limits.kva - p * p, 0.0))
    q_max = min(scale * limits.kvar_max, circle)
    q_min = -min(scale * limits.kvar_max_abs, circle)
    return q_min, q_max


def volt_var_q(curve: VoltVarCurve, v: float) -> float:
    """Commanded q (fraction of kVA) for terminal voltage v (p.u.).

    Piecewise linear through the four corner points, flat outside them;
    positive values inject reactive power into the grid.
    """
    if not v > 0:
        raise ValueError(f"voltage must be positive, got {v!r}")
    vs = [pt[0] for pt in curve.points]
    qs = [pt[1] for pt in curve.points]
    return float(np.interp(v, vs, qs))


def inverter_output(unit: PvUnit, v: float, irradiance_multiplier: float) -> tuple[float, float]:
    """(p kW, q kvar) produced on each connected phase.

    The volt-var command is evaluated at v (for multi-phase units the caller
    supplies the mean phase voltage magnitude), converted to kvar on the
    nameplate and clamped to the capability envelope at the current output;
    active power is never curtailed for reactive headroom.
    """
    if not v > 0:
        raise ValueError(f"voltage must be positive, got {v!r}")
    p = available_active_power(unit, irradiance_multiplier)
    if unit.mode == MODE_PF:
        q = 0.0
    else:
        q_min, q_max = reactive_capability(unit.limits, p)
        q = min(max(volt_var_q(unit.curve, v) * unit.limits.kva, q_min), q_max)
    n = len(unit.phases)
    return p / n, q / n
