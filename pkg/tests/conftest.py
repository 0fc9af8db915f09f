"""Shared builders for small deterministic and randomized test networks."""

import itertools

import numpy as np
import pytest

from cvrsim.network import (
    PHASES,
    Bus,
    FeederNetwork,
    LineSegment,
    Phase,
    SubstationTransformer,
)
from cvrsim.zipload import ZipLoad

# 13.8 kV line-to-line, line-to-neutral volts
VB = 7967.433714816836

# default per-unit bases (10 MVA system base)
S1_KW = 10000.0 / 3.0
Z_BASE = VB * VB / (S1_KW * 1000.0)


def z_single_phase(r_pu: float, x_pu: float = 0.0) -> np.ndarray:
    """Phase-A-only 3x3 impedance matrix from per-unit targets (1 mile)."""
    z = np.zeros((3, 3), dtype=complex)
    z[0, 0] = (r_pu + 1j * x_pu) * Z_BASE
    return z


def two_bus_network(r_pu: float, p_pu: float, q_pu: float = 0.0,
                    x_pu: float = 0.0, zip_coeffs=(0.0, 0.0, 1.0),
                    pv_units=()) -> FeederNetwork:
    """Single-phase two-bus feeder with one load, impedances in per-unit."""
    zp, ip, pp = zip_coeffs
    return FeederNetwork(
        buses=(Bus("S", PHASES, VB), Bus("L", (Phase.A,), VB)),
        lines=(LineSegment("l1", "S", "L", 1.0, z_single_phase(r_pu, x_pu)),),
        transformer=SubstationTransformer(),
        source_bus="S",
        loads=(ZipLoad("L", Phase.A, p0=p_pu * S1_KW, q0=q_pu * S1_KW,
                       zp=zp, ip=ip, pp=pp, zq=zp, iq=ip, pq=pp),),
        pv_units=tuple(pv_units),
    )


def random_radial_network(rng: np.random.Generator, n_buses: int,
                          with_injections: bool = True):
    """Seeded random radial network with mixed ZIP loads and, optionally,
    fixed PV-style injections; child phase sets nest into their parents."""
    buses = [Bus("B0", PHASES, VB)]
    lines = []
    phase_sets = {"B0": PHASES}
    for i in range(1, n_buses):
        parent = f"B{rng.integers(0, i)}"
        parent_phases = phase_sets[parent]
        if rng.random() < 0.7 or len(parent_phases) == 1:
            phases = parent_phases
        else:
            k = int(rng.integers(1, len(parent_phases)))
            idx = sorted(rng.choice(len(parent_phases), size=k, replace=False))
            phases = tuple(parent_phases[j] for j in idx)
        bus_id = f"B{i}"
        phase_sets[bus_id] = phases
        buses.append(Bus(bus_id, phases, VB))
        z = np.zeros((3, 3), dtype=complex)
        for p in phases:
            z[p.index, p.index] = rng.uniform(0.2, 0.8) + 1j * rng.uniform(0.4, 1.2)
        for a, b in itertools.combinations([p.index for p in phases], 2):
            m = rng.uniform(0.05, 0.15) + 1j * rng.uniform(0.15, 0.35)
            z[a, b] = m
            z[b, a] = m
        lines.append(LineSegment(f"L{i}", parent, bus_id,
                                 float(rng.uniform(0.2, 1.5)), z))
    loads = []
    for b in buses[1:]:
        for p in b.phases:
            if rng.random() < 0.7:
                zp = float(rng.uniform(0, 1))
                ip = float(rng.uniform(0, 1 - zp))
                pp = 1.0 - zp - ip
                loads.append(ZipLoad(b.id, p, p0=float(rng.uniform(10, 120)),
                                     q0=float(rng.uniform(0, 40)),
                                     zp=zp, ip=ip, pp=pp, zq=zp, iq=ip, pq=pp))
    injections = {}
    if with_injections:
        for b in buses[1:]:
            for p in b.phases:
                if rng.random() < 0.3:
                    injections[(b.id, p)] = (float(rng.uniform(0, 80)),
                                             float(rng.uniform(-20, 20)))
    network = FeederNetwork(tuple(buses), tuple(lines), SubstationTransformer(),
                            "B0", tuple(loads))
    return network, injections


def assert_power_balance(solution, tol_pu: float = 1e-6):
    """Source + PV - load - losses must vanish, per phase and in total."""
    assert solution.converged
    per_phase = (solution.source_injection.real + solution.pv_p_per_phase
                 - solution.load_p_per_phase - solution.loss_per_phase)
    assert np.max(np.abs(per_phase)) / S1_KW < tol_pu, per_phase
    assert abs(solution.power_balance_residual()) / S1_KW < tol_pu


@pytest.fixture(scope="session")
def default_feeder():
    from cvrsim.scenario import synthesize_feeder

    return synthesize_feeder()
