"""Voltage-dependent customer loads (polynomial ZIP model)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .network import Phase

# Study-wide default split between constant-impedance, constant-current and
# constant-power fractions, applied to both active and reactive power.
DEFAULT_ZIP = (0.5, 0.3, 0.2)

_COEFF_TOL = 1e-12


@dataclass(frozen=True)
class ZipLoad:
    """Single-phase wye-connected load.

    p0/q0 are the powers at rated voltage v0 (p.u.); the three coefficient
    fractions for each of P and Q must sum to one.
    """

    bus: str
    phase: Phase
    p0: float
    q0: float = 0.0
    zp: float = DEFAULT_ZIP[0]
    ip: float = DEFAULT_ZIP[1]
    pp: float = DEFAULT_ZIP[2]
    zq: float = DEFAULT_ZIP[0]
    iq: float = DEFAULT_ZIP[1]
    pq: float = DEFAULT_ZIP[2]
    v0: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase.parse(self.phase))
        if abs(self.zp + self.ip + self.pp - 1.0) > _COEFF_TOL:
            raise ValueError(
                f"load at {self.bus}: active ZIP fractions sum to "
                f"{self.zp + self.ip + self.pp!r}, expected 1"
            )
        if abs(self.zq + self.iq + self.pq - 1.0) > _COEFF_TOL:
            raise ValueError(
                f"load at {self.bus}: reactive ZIP fractions sum to "
                f"{self.zq + self.iq + self.pq!r}, expected 1"
            )
        if self.p0 < 0:
            raise ValueError(f"load at {self.bus}: negative p0 (generation is modeled separately)")
        if self.v0 <= 0:
            raise ValueError(f"load at {self.bus}: v0 must be positive")


def _check_voltage(v: float) -> None:
    if not v > 0:
        raise ValueError(f"voltage must be positive, got {v!r}")


def evaluate(load: ZipLoad, v: float) -> tuple[float, float]:
    """Active/reactive power (kW, kvar) drawn at voltage v (p.u.).

    Written as p0*(1 + zp*(u^2-1) + ip*(u-1)) with u = v/v0, which equals the
    plain quadratic whenever the fractions sum to one and is exact at v == v0.
    """
    _check_voltage(v)
    u = v / load.v0
    p = load.p0 * (1.0 + load.zp * (u * u - 1.0) + load.ip * (u - 1.0))
    q = load.q0 * (1.0 + load.zq * (u * u - 1.0) + load.iq * (u - 1.0))
    return p, q


def sensitivity(load: ZipLoad, v: float) -> float:
    """dP/dV in kW per p.u. at voltage v."""
    _check_voltage(v)
    return load.p0 * (2.0 * load.zp * v / (load.v0 * load.v0) + load.ip / load.v0)


def kvar_for_power_factor(p_kw: float, power_factor: float) -> float:
    """Reactive power matching a lagging power factor for the given kW."""
    if not 0 < power_factor <= 1:
        raise ValueError("power factor must be in (0, 1]")
    return p_kw * math.tan(math.acos(power_factor))
