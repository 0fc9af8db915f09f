"""Radial multi-feeder distribution network model.

Buses, line segments with 3x3 coupled series impedance, the substation
transformer with its per-phase tap changer, and the topological services
(radiality validation, sweep ordering) needed by the ladder solver.
"""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable

import numpy as np

if TYPE_CHECKING:
    from .inverter import PvUnit
    from .zipload import ZipLoad

DEFAULT_MVA_BASE = 10.0

MIN_TAP = -16
MAX_TAP = 16


class Phase(enum.Enum):
    """One of the three network phases; index gives the array column."""

    A = 0
    B = 1
    C = 2

    @property
    def index(self) -> int:
        return self.value

    @classmethod
    def parse(cls, value: "Phase | str") -> "Phase":
        if isinstance(value, Phase):
            return value
        name = str(value).strip().upper()
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown phase {value!r} (expected A, B or C)") from None


PHASES = (Phase.A, Phase.B, Phase.C)


def parse_phases(value: "str | Iterable[Phase | str]") -> tuple[Phase, ...]:
    """Normalize phases given as 'ABC' or ('A', Phase.B) to a sorted tuple."""
    if isinstance(value, str):
        items = list(value.strip())
    else:
        items = list(value)
    phases = sorted({Phase.parse(p) for p in items}, key=lambda p: p.index)
    if not phases:
        raise ValueError("phase set must not be empty")
    return tuple(phases)


def phases_to_str(phases: Iterable[Phase]) -> str:
    return "".join(p.name for p in sorted(phases, key=lambda p: p.index))


@dataclass(frozen=True)
class Bus:
    """Primary network bus.

    base_voltage is the line-to-neutral base in volts;
    distance_from_substation is the path length in miles.
    """

    id: str
    phases: tuple[Phase, ...] = PHASES
    base_voltage: float = 7967.433714816836
    feeder_id: str = "main"
    distance_from_substation: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", parse_phases(self.phases))
        if not self.id:
            raise ValueError("bus id must be non-empty")
        if self.base_voltage <= 0:
            raise ValueError(f"bus {self.id}: base_voltage must be positive")
        if self.distance_from_substation < 0:
            raise ValueError(f"bus {self.id}: distance must be non-negative")


@dataclass(frozen=True, eq=False)
class LineSegment:
    """Series line segment with per-mile 3x3 complex impedance (ohms).

    Rows/columns for phases absent on the segment are zero.  from_bus is the
    endpoint closer to the substation (radial orientation).
    """

    id: str
    from_bus: str
    to_bus: str
    length: float
    z_per_mile: np.ndarray

    def __post_init__(self) -> None:
        z = np.array(self.z_per_mile, dtype=np.complex128)
        if z.shape != (3, 3):
            raise ValueError(f"line {self.id}: impedance must be 3x3, got {z.shape}")
        if not np.allclose(z, z.T, rtol=1e-9, atol=1e-12):
            raise ValueError(f"line {self.id}: impedance matrix must be symmetric")
        diag = np.diag(z)
        if np.any(diag.real < -1e-12):
            raise ValueError(f"line {self.id}: negative series resistance")
        if self.length < 0:
            raise ValueError(f"line {self.id}: negative length")
        if self.from_bus == self.to_bus:
            raise ValueError(f"line {self.id}: from_bus equals to_bus")
        z.setflags(write=False)
        object.__setattr__(self, "z_per_mile", z)

    def z_total(self) -> np.ndarray:
        """Total series impedance of the segment in ohms."""
        return self.z_per_mile * self.length

    def phase_pattern(self) -> tuple[int, ...]:
        """Indices of phases carried by the segment (nonzero self impedance)."""
        diag = np.abs(np.diag(self.z_per_mile))
        present = tuple(i for i in range(3) if diag[i] > 0)
        return present if present else (0, 1, 2)


@dataclass(frozen=True)
class OltcConfig:
    """Tap-changer range and its affine tap-to-voltage map."""

    min_tap: int = MIN_TAP
    max_tap: int = MAX_TAP
    v_at_min: float = 0.9
    v_at_max: float = 1.1
    per_phase: bool = True

    def __post_init__(self) -> None:
        if self.min_tap >= self.max_tap:
            raise ValueError("min_tap must be below max_tap")
        if self.v_at_min >= self.v_at_max:
            raise ValueError("v_at_min must be below v_at_max")

    @property
    def step(self) -> float:
        return (self.v_at_max - self.v_at_min) / (self.max_tap - self.min_tap)


DEFAULT_OLTC = OltcConfig()


def tap_to_ratio(config: OltcConfig, tap: int) -> float:
    """Per-unit source voltage ratio for an integer tap position.

    Linear blend between the range endpoints; exact at min_tap, tap 0 (when
    the range is symmetric) and max_tap, 0.00625 p.u. per step with defaults.
    """
    if tap < config.min_tap or tap > config.max_tap:
        raise ValueError(
            f"tap {tap} outside [{config.min_tap}, {config.max_tap}]"
        )
    span = config.max_tap - config.min_tap
    w_hi = tap - config.min_tap
    w_lo = config.max_tap - tap
    return (config.v_at_max * w_hi + config.v_at_min * w_lo) / span


@dataclass(frozen=True)
class SubstationTransformer:
    """Step-down substation transformer with three single-phase tap changers."""

    rating_kva: float = 5000.0
    primary_kv: float = 69.0
    secondary_kv: float = 13.8
    tap_positions: tuple[int, int, int] = (0, 0, 0)
    oltc: OltcConfig = field(default_factory=OltcConfig)

    def __post_init__(self) -> None:
        taps = tuple(int(t) for t in self.tap_positions)
        if len(taps) != 3:
            raise ValueError("tap_positions must hold one tap per phase")
        for t in taps:
            if t < self.oltc.min_tap or t > self.oltc.max_tap:
                raise ValueError(
                    f"tap {t} outside [{self.oltc.min_tap}, {self.oltc.max_tap}]"
                )
        object.__setattr__(self, "tap_positions", taps)
        if self.rating_kva <= 0 or self.primary_kv <= 0 or self.secondary_kv <= 0:
            raise ValueError("transformer ratings must be positive")


@dataclass(frozen=True, eq=False)
class FeederNetwork:
    """Immutable radial network: buses, lines, one substation transformer,
    voltage-dependent loads and PV units.

    Safe to share across concurrent scenario runs; use :func:`validate_radial`
    for structural diagnostics before solving.
    """

    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    transformer: SubstationTransformer
    source_bus: str
    loads: "tuple[ZipLoad, ...]" = ()
    pv_units: "tuple[PvUnit, ...]" = ()
    mva_base: float = DEFAULT_MVA_BASE

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "pv_units", tuple(self.pv_units))
        if self.mva_base <= 0:
            raise ValueError("mva_base must be positive")
        bus_phases = {}
        for b in self.buses:
            bus_phases.setdefault(b.id, set()).update(b.phases)
        if self.source_bus not in bus_phases:
            raise ValueError(f"source bus {self.source_bus!r} not among buses")
        for load in self.loads:
            phases = bus_phases.get(load.bus)
            if phases is None:
                raise ValueError(f"load references unknown bus {load.bus!r}")
            if load.phase not in phases:
                raise ValueError(
                    f"load at bus {load.bus!r} uses absent phase {load.phase.name}"
                )
        for unit in self.pv_units:
            phases = bus_phases.get(unit.bus)
            if phases is None:
                raise ValueError(f"pv unit references unknown bus {unit.bus!r}")
            for ph in unit.phases:
                if ph not in phases:
                    raise ValueError(
                        f"pv unit at bus {unit.bus!r} uses absent phase {ph.name}"
                    )

    @property
    def bus_map(self) -> dict[str, Bus]:
        cached = self.__dict__.get("_bus_map")
        if cached is None:
            cached = {b.id: b for b in self.buses}
            object.__setattr__(self, "_bus_map", cached)
        return cached

    def with_pv(self, units: "Iterable[PvUnit]") -> "FeederNetwork":
        return replace(self, pv_units=tuple(units))

    @property
    def s_base_1ph_kw(self) -> float:
        """Per-phase power base in kW."""
        return self.mva_base * 1000.0 / 3.0


@dataclass(frozen=True)
class RadialValidation:
    """Structural diagnostics for the tree invariant."""

    ok: bool
    duplicate_bus_ids: tuple[str, ...] = ()
    duplicate_line_ids: tuple[str, ...] = ()
    unknown_endpoints: tuple[str, ...] = ()
    unreachable_buses: tuple[str, ...] = ()
    cycle_lines: tuple[str, ...] = ()
    misoriented_lines: tuple[str, ...] = ()
    messages: tuple[str, ...] = ()


def validate_radial(network: FeederNetwork) -> RadialValidation:
    """Check that the line graph is a tree rooted at the source bus.

    Returns diagnostics naming every offending bus/line instead of raising.
    """
    messages: list[str] = []
    bus_ids = [b.id for b in network.buses]
    known = set(bus_ids)
    dup_bus = tuple(sorted(i for i, c in Counter(bus_ids).items() if c > 1))
    dup_line = tuple(
        sorted(i for i, c in Counter(l.id for l in network.lines).items() if c > 1)
    )
    unknown = tuple(
        sorted(
            l.id
            for l in network.lines
            if l.from_bus not in known or l.to_bus not in known
        )
    )
    if dup_bus:
        messages.append(f"duplicate bus ids: {', '.join(dup_bus)}")
    if dup_line:
        messages.append(f"duplicate line ids: {', '.join(dup_line)}")
    if unknown:
        messages.append(f"lines with unknown endpoints: {', '.join(unknown)}")
    if len(network.lines) != len(network.buses) - 1:
        messages.append(
            f"line count {len(network.lines)} != bus count - 1 "
            f"({len(network.buses) - 1})"
        )

    adjacency: dict[str, list[tuple[str, LineSegment]]] = {b: [] for b in known}
    for line in network.lines:
        if line.from_bus in known and line.to_bus in known:
            adjacency[line.from_bus].append((line.to_bus, line))
            adjacency[line.to_bus].append((line.from_bus, line))

    visited: set[str] = set()
    tree_lines: set[str] = set()
    misoriented: list[str] = []
    if network.source_bus in known:
        visited.add(network.source_bus)
        queue = deque([network.source_bus])
        while queue:
            bus = queue.popleft()
            for other, line in adjacency[bus]:
                if line.id in tree_lines:
                    continue
                if other in visited:
                    continue
                tree_lines.add(line.id)
                if line.from_bus != bus:
                    misoriented.append(line.id)
                visited.add(other)
                queue.append(other)
    unreachable = tuple(sorted(known - visited))
    cycles = tuple(
        sorted(
            l.id
            for l in network.lines
            if l.id not in tree_lines
            and l.from_bus in visited
            and l.to_bus in visited
        )
    )
    if unreachable:
        messages.append(f"unreachable buses: {', '.join(unreachable)}")
    if cycles:
        messages.append(f"cycle-closing lines: {', '.join(cycles)}")
    if misoriented:
        messages.append(
            f"lines oriented against the radial direction: {', '.join(misoriented)}"
        )
    ok = not (dup_bus or dup_line or unknown or unreachable or cycles or misoriented)
    ok = ok and len(network.lines) == len(network.buses) - 1
    return RadialValidation(
        ok=ok,
        duplicate_bus_ids=dup_bus,
        duplicate_line_ids=dup_line,
        unknown_endpoints=unknown,
        unreachable_buses=unreachable,
        cycle_lines=cycles,
        misoriented_lines=tuple(misoriented),
        messages=tuple(messages),
    )


def require_radial(network: FeederNetwork) -> None:
    report = validate_radial(network)
    if not report.ok:
        raise ValueError("network is not radial: " + "; ".join(report.messages))


def sweep_order(network: FeederNetwork) -> list[str]:
    """Line ids in backward-sweep order (leaves first, source last).

    Every line appears after all lines of its downstream subtree; the forward
    order is the reverse.  Ties between sibling subtrees break by ascending
    line id, so the ordering is deterministic.
    """
    require_radial(network)
    children: dict[str, list[tuple[str, str]]] = {}
    for line in network.lines:
        children.setdefault(line.from_bus, []).append((line.id, line.to_bus))
    for lst in children.values():
        lst.sort()

    order: list[str] = []
    # iterative post-order; (bus, incoming line, expanded flag)
    stack: list[tuple[str, str | None, bool]] = [(network.source_bus, None, False)]
    while stack:
        bus, line_id, expanded = stack.pop()
        if expanded:
            if line_id is not None:
                order.append(line_id)
            continue
        stack.append((bus, line_id, True))
        for lid, child in reversed(children.get(bus, [])):
            stack.append((child, lid, False))
    return order
