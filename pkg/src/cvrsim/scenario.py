"""Experiment construction: synthetic feeder, PV allocation, 24-hour runs."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .inverter import MODE_VOLT_VAR, MODES, InverterLimits, PvUnit, VoltVarCurve
from .network import Bus, FeederNetwork, LineSegment, PHASES, SubstationTransformer
from .oltc import CvrConstraints, run_timestep
from .powerflow import SolveOptions, TimeInputs
from .zipload import ZipLoad, kvar_for_power_factor

# Residential double-hump day, normalized to peak 1.0 at hour 18.
DEFAULT_LOAD_PROFILE = (
    0.52, 0.48, 0.45, 0.44, 0.46, 0.52, 0.62, 0.71,
    0.77, 0.78, 0.76, 0.73, 0.70, 0.68, 0.67, 0.70,
    0.80, 0.92, 1.00, 0.97, 0.90, 0.80, 0.68, 0.58,
)

# Clear-sky bell: sunrise hour 6, peak 1.0 at hour 13, sunset hour 19.
DEFAULT_PV_PROFILE = (
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05, 0.20,
    0.42, 0.63, 0.80, 0.92, 0.98, 1.00, 0.97, 0.88,
    0.73, 0.52, 0.28, 0.08, 0.0, 0.0, 0.0, 0.0,
)

# Inverters are oversized so the full 0.44 p.u. reactive limit stays inside
# the apparent-power circle at peak output.
PV_KVA_HEADROOM = 0.9


class AllocationKind(str, enum.Enum):
    HEAD = "head"
    DISPERSED = "dispersed"
    END = "end"

    @classmethod
    def parse(cls, value: "AllocationKind | str") -> "AllocationKind":
        if isinstance(value, AllocationKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown allocation {value!r}; expected head, dispersed or end"
            ) from None


def _q12(x: float) -> float:
    """Quantize to 12 significant digits, the serialization precision."""
    return float(format(float(x), ".12g"))


def _check_profile(profile, name: str, upper: float | None) -> tuple[float, ...]:
    values = tuple(float(x) for x in profile)
    if len(values) != 24:
        raise ValueError(f"{name} must have exactly 24 entries, got {len(values)}")
    for h, x in enumerate(values):
        if x < 0 or not math.isfinite(x):
            raise ValueError(f"{name}[{h}] = {x!r} is invalid")
        if upper is not None and x > upper:
            raise ValueError(f"{name}[{h}] = {x!r} exceeds {upper}")
    return values


# Untransposed overhead construction, ohms per mile.
DEFAULT_Z_PER_MILE = np.array(
    [
        [0.35 + 0.95j, 0.15 + 0.45j, 0.15 + 0.40j],
        [0.15 + 0.45j, 0.36 + 0.93j, 0.15 + 0.43j],
        [0.15 + 0.40j, 0.15 + 0.43j, 0.34 + 0.96j],
    ]
)


@dataclass(frozen=True)
class SynthesisParams:
    """Knobs for the synthetic three-feeder network.

    The bus budget counts the substation bus, so the default totals 240.
    Each feeder is a mainline spine carrying a few long, heavily loaded
    branches plus short laterals; lengths are scaled to hit
    total_length_miles and per-feeder rated load is normalized to the
    requested shares of total_load_kw.
    """

    buses_per_feeder: tuple[int, int, int] = (80, 80, 79)
    total_length_miles: float = 23.0
    total_load_kw: float = 24000.0
    feeder_load_shares: tuple[float, float, float] = (0.40, 0.35, 0.25)
    load_power_factor: float = 0.95
    spine_fraction: float = 0.12
    branch_fraction: float = 0.52
    branches_per_feeder: int = 3
    remote_fraction: float = 0.06
    z_per_mile: np.ndarray = field(default_factory=lambda: DEFAULT_Z_PER_MILE.copy())
    # conductor downsizing away from the spine (impedance multipliers)
    z_scale_branch: float = 2.2
    z_scale_lateral: float = 2.6
    z_scale_remote: float = 1.6
    secondary_kv: float = 13.8
    primary_kv: float = 69.0
    transformer_kva: float = 25000.0
    mva_base: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if any(n < 1 for n in self.buses_per_feeder):
            raise ValueError("each feeder needs at least one bus")
        if self.total_length_miles <= 0 or self.total_load_kw < 0:
            raise ValueError("length and load must be positive")
        if abs(sum(self.feeder_load_shares) - 1.0) > 1e-9:
            raise ValueError("feeder load shares must sum to 1")
        if self.spine_fraction <= 0 or self.spine_fraction + self.branch_fraction >= 1:
            raise ValueError("spine/branch fractions must leave room for laterals")


def synthesize_feeder(params: SynthesisParams | None = None) -> FeederNetwork:
    """Deterministic seeded radial network: three feeders off one substation,
    each a spine with long branches and short laterals, customer loads
    phased round-robin.

    All synthesized numbers are quantized to the 12-significant-digit
    serialization precision so a save/load round trip is the identity.
    """
    params = params or SynthesisParams()
    rng = np.random.default_rng(params.seed)
    v_base = _q12(params.secondary_kv * 1000.0 / math.sqrt(3.0))

    source_id = "SUB"
    buses: list[Bus] = [
        Bus(source_id, PHASES, v_base, feeder_id="SUB", distance_from_substation=0.0)
    ]
    lines: list[LineSegment] = []
    loads: list[ZipLoad] = []

    # raw segment records: (from_bus, to_bus, weight, conductor z scale)
    segments: list[tuple[str, str, float, float]] = []
    bus_feeder: list[tuple[str, str]] = []  # (bus id, feeder id), load order

    for f, n_f in enumerate(params.buses_per_feeder):
        feeder_id = f"F{f + 1}"
        names = [f"{feeder_id}B{k:03d}" for k in range(n_f)]
        n_spine = min(max(2, round(params.spine_fraction * n_f)), n_f)
        n_remote = min(max(1, round(params.remote_fraction * n_f)), n_f - n_spine)
        n_branch_total = min(round(params.branch_fraction * n_f),
                             n_f - n_spine - n_remote)
        spine = names[:n_spine]
        prev = source_id
        for b in spine:
            segments.append((prev, b, float(rng.uniform(1.8, 2.6)), 1.0))
            prev = b
        cursor = n_spine
        # remote pocket: a long lightly loaded extension past the spine end
        prev = spine[-1]
        for b in names[cursor:cursor + n_remote]:
            segments.append((prev, b, float(rng.uniform(2.2, 3.2)),
                             params.z_scale_remote))
            prev = b
        cursor += n_remote
        # long branches splitting off the middle of the spine
        n_branches = max(1, params.branches_per_feeder)
        sizes = [n_branch_total // n_branches] * n_branches
        for i in range(n_branch_total % n_branches):
            sizes[i] += 1
        lo = n_spine // 4
        hi = max(lo + 1, n_spine // 2 + 1)
        for size in sizes:
            if size == 0:
                continue
            anchor_pos = int(rng.integers(lo, hi))
            prev = spine[anchor_pos]
            for b in names[cursor:cursor + size]:
                segments.append((prev, b, float(rng.uniform(0.7, 1.1)),
                                 params.z_scale_branch))
                prev = b
            cursor += size
        # short laterals off any already-placed spine or branch bus
        placed = spine + names[n_spine + n_remote:cursor]
        remaining = names[cursor:]
        pos = 0
        while pos < len(remaining):
            k = int(rng.integers(1, 4))
            chain = remaining[pos:pos + k]
            pos += k
            anchor = placed[int(rng.integers(0, len(placed)))]
            prev = anchor
            for b in chain:
                segments.append((prev, b, float(rng.uniform(0.3, 0.6)),
                                 params.z_scale_lateral))
                prev = b
        for b in names:
            bus_feeder.append((b, feeder_id))

    scale = params.total_length_miles / sum(w for _, _, w, _ in segments)
    lengths = {(fb, tb): _q12(w * scale) for fb, tb, w, _ in segments}

    # distances accumulate along the tree
    distance = {source_id: 0.0}
    for fb, tb, _, _ in segments:
        distance[tb] = _q12(distance[fb] + lengths[(fb, tb)])

    for b, feeder_id in bus_feeder:
        buses.append(Bus(b, PHASES, v_base, feeder_id=feeder_id,
                         distance_from_substation=distance[b]))
    z_quantized: dict[float, np.ndarray] = {}
    for zs in {zs for _, _, _, zs in segments}:
        z = params.z_per_mile * zs
        z_quantized[zs] = np.vectorize(
            lambda c: complex(_q12(c.real), _q12(c.imag))
        )(z).astype(np.complex128)
    for k, (fb, tb, _, zs) in enumerate(segments):
        lines.append(LineSegment(f"L{k:03d}", fb, tb, lengths[(fb, tb)],
                                 z_quantized[zs]))

    # one customer per feeder bus, phases round-robin in construction order
    raw_kw = {b: float(rng.uniform(0.5, 1.5)) for b, _ in bus_feeder}
    for f in range(3):
        feeder_id = f"F{f + 1}"
        members = [b for b, fid in bus_feeder if fid == feeder_id]
        total_raw = sum(raw_kw[b] for b in members)
        target = params.total_load_kw * params.feeder_load_shares[f]
        for b in members:
            raw_kw[b] = raw_kw[b] / total_raw * target
    for i, (b, _) in enumerate(bus_feeder):
        p0 = _q12(raw_kw[b])
        q0 = _q12(kvar_for_power_factor(p0, params.load_power_factor))
        loads.append(ZipLoad(bus=b, phase=PHASES[i % 3], p0=p0, q0=q0))

    transformer = SubstationTransformer(
        rating_kva=params.transformer_kva,
        primary_kv=params.primary_kv,
        secondary_kv=params.secondary_kv,
    )
    return FeederNetwork(
        buses=tuple(buses),
        lines=tuple(lines),
        transformer=transformer,
        source_bus=source_id,
        loads=tuple(loads),
        mva_base=params.mva_base,
    )


def system_peak_kw(network: FeederNetwork, load_profile: Sequence[float]) -> tuple[int, float]:
    """(peak hour, aggregate load kW at that hour) from the rated-load profile."""
    profile = _check_profile(load_profile, "load profile", None)
    peak_hour = int(np.argmax(profile))
    rated = sum(load.p0 for load in network.loads)
    return peak_hour, rated * profile[peak_hour]


def _feeder_ids(network: FeederNetwork) -> list[str]:
    seen: list[str] = []
    for b in network.buses:
        if b.id == network.source_bus:
            continue
        if b.feeder_id not in seen:
            seen.append(b.feeder_id)
    return seen


def _make_unit(bus: str, phases, peak_kw: float, mode: str,
               curve: VoltVarCurve | None) -> PvUnit:
    kva = _q12(peak_kw / PV_KVA_HEADROOM)
    limits = InverterLimits(kva=kva)
    kwargs = {} if curve is None else {"curve": curve}
    return PvUnit(bus=bus, phases=phases, peak_kw=_q12(peak_kw),
                  limits=limits, mode=mode, **kwargs)


def allocate_pv(network: FeederNetwork,
                allocation: AllocationKind | str,
                penetration_pct: float,
                mode: str,
                load_profile: Sequence[float] = DEFAULT_LOAD_PROFILE,
                curve: VoltVarCurve | None = None,
                units_per_feeder: int = 1) -> FeederNetwork:
    """Attach PV units for one of the three siting patterns.

    Aggregate peak output equals penetration_pct percent of the system peak
    load.  Head: one balanced three-phase unit at the first bus of each
    feeder, sized by the feeder's share of the peak.  Dispersed: one unit per
    customer on the customer's phase, sized from its load at the peak hour.
    End: like Head but at each feeder's electrically deepest bus.
    """
    allocation = AllocationKind.parse(allocation)
    if mode not in MODES:
        raise ValueError(f"unknown inverter mode {mode!r}")
    if penetration_pct < 0:
        raise ValueError("penetration must be non-negative")
    if not network.loads:
        raise ValueError("cannot allocate PV on a network without loads")
    if penetration_pct == 0:
        return network.with_pv(())

    peak_hour, _ = system_peak_kw(network, load_profile)
    peak_mult = _check_profile(load_profile, "load profile", None)[peak_hour]
    frac = penetration_pct / 100.0

    units: list[PvUnit] = []
    if allocation is AllocationKind.DISPERSED:
        for load in network.loads:
            peak_kw = frac * load.p0 * peak_mult
            if peak_kw <= 0:
                continue
            units.append(_make_unit(load.bus, (load.phase,), peak_kw, mode, curve))
    else:
        if units_per_feeder != 1:
            raise ValueError("only one aggregate unit per feeder is supported")
        bus_map = network.bus_map
        feeder_loads: dict[str, float] = {}
        for load in network.loads:
            fid = bus_map[load.bus].feeder_id
            feeder_loads[fid] = feeder_loads.get(fid, 0.0) + load.p0 * peak_mult
        for fid in _feeder_ids(network):
            share_kw = frac * feeder_loads.get(fid, 0.0)
            if share_kw <= 0:
                continue
            members = [b for b in network.buses
                       if b.feeder_id == fid and b.id != network.source_bus]
            # ties between equidistant buses resolve to the ascending bus id
            if allocation is AllocationKind.HEAD:
                target = min(members, key=lambda b: (b.distance_from_substation, b.id))
            else:
                target = min(members, key=lambda b: (-b.distance_from_substation, b.id))
            units.append(_make_unit(target.id, target.phases, share_kw, mode, curve))
    return network.with_pv(units)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Everything that determines a 24-step run."""

    feeder: FeederNetwork
    allocation: AllocationKind = AllocationKind.DISPERSED
    penetration_pct: float = 60.0
    mode: str = MODE_VOLT_VAR
    cvr_enabled: bool = True
    load_profile: tuple[float, ...] = DEFAULT_LOAD_PROFILE
    pv_profile: tuple[float, ...] = DEFAULT_PV_PROFILE
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "allocation", AllocationKind.parse(self.allocation))
        if self.mode not in MODES:
            raise ValueError(f"unknown inverter mode {self.mode!r}")
        if self.penetration_pct < 0:
            raise ValueError("penetration must be non-negative")
        object.__setattr__(
            self, "load_profile", _check_profile(self.load_profile, "load profile", None)
        )
        object.__setattr__(
            self, "pv_profile", _check_profile(self.pv_profile, "pv profile", 1.0)
        )

    def label(self) -> str:
        cvr = "cvr" if self.cvr_enabled else "nocvr"
        pen = format(self.penetration_pct, "g")
        return f"{self.allocation.value}_{self.mode}_{cvr}_p{pen}"

    def same_study(self, other: "ScenarioConfig") -> bool:
        """True when configs differ at most in the CVR flag."""
        return (
            self.feeder is other.feeder
            and self.allocation == other.allocation
            and self.penetration_pct == other.penetration_pct
            and self.mode == other.mode
            and self.load_profile == other.load_profile
            and self.pv_profile == other.pv_profile
            and self.seed == other.seed
        )


@dataclass(eq=False)
class HourRecord:
    hour: int
    taps: tuple[int, int, int]
    feasible: bool
    substation_v: np.ndarray
    bus_v: np.ndarray
    load_p_kw: float
    load_q_kvar: float
    pv_p_kw: float
    pv_q_kvar: float
    losses_kw: float
    source_p_kw: float
    source_q_kvar: float
    v_min: float
    v_max: float


@dataclass(eq=False)
class TimeSeriesResult:
    config: ScenarioConfig
    network: FeederNetwork
    bus_ids: tuple[str, ...]
    phase_mask: np.ndarray
    hours: list[HourRecord]

    @property
    def infeasible_hours(self) -> tuple[int, ...]:
        return tuple(h.hour for h in self.hours if not h.feasible)

    def substation_voltages(self) -> np.ndarray:
        """(24, 3) substation voltage magnitudes."""
        return np.array([h.substation_v for h in self.hours])


def run_scenario(config: ScenarioConfig,
                 options: SolveOptions | None = None,
                 constraints: CvrConstraints | None = None) -> TimeSeriesResult:
    """Run the 24 hourly steps of one scenario in order.

    PV cut-in/cut-out state carries across hours; infeasible hours are
    recorded and the run continues; an hour whose solve fails outright
    aborts with that hour in the error.
    """
    options = options or SolveOptions()
    net = allocate_pv(config.feeder, config.allocation, config.penetration_pct,
                      config.mode, load_profile=config.load_profile)
    records: list[HourRecord] = []
    bus_ids: tuple[str, ...] = ()
    phase_mask = None
    for hour in range(24):
        ti = TimeInputs(load_multiplier=config.load_profile[hour],
                        pv_multiplier=config.pv_profile[hour])
        step = run_timestep(net, ti, config.cvr_enabled, options,
                            constraints=constraints)
        sol = step.solution
        # under CVR, control trouble at the fallback tap is recorded as an
        # infeasible hour; without CVR it is an outright solver failure
        failed = not sol.converged or (not step.cvr_enabled and not sol.control_converged)
        if failed:
            raise RuntimeError(f"power flow failed to converge at hour {hour}")
        bus_ids = sol.bus_ids
        phase_mask = sol.phase_mask
        records.append(HourRecord(
            hour=hour,
            taps=step.taps,
            feasible=step.feasible,
            substation_v=np.abs(sol.voltages[0]).copy(),
            bus_v=np.abs(sol.voltages),
            load_p_kw=sol.total_load_p,
            load_q_kvar=sol.total_load_q,
            pv_p_kw=sol.total_pv_p,
            pv_q_kvar=sol.total_pv_q,
            losses_kw=sol.losses_p,
            source_p_kw=sol.source_p,
            source_q_kvar=sol.source_q,
            v_min=sol.v_min,
            v_max=sol.v_max,
        ))
    return TimeSeriesResult(config=config, network=net, bus_ids=bus_ids,
                            phase_mask=phase_mask, hours=records)


@dataclass(eq=False)
class ScenarioOutcome:
    config: ScenarioConfig
    result: TimeSeriesResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_outcome(config: ScenarioConfig) -> ScenarioOutcome:
    try:
        return ScenarioOutcome(config, run_scenario(config))
    except Exception as exc:  # per-scenario isolation
        return ScenarioOutcome(config, None, f"{type(exc).__name__}: {exc}")


def run_matrix(configs: Sequence[ScenarioConfig], parallel: int = 1) -> list[ScenarioOutcome]:
    """Run a batch of scenarios; output order matches input order.

    Failures are isolated per scenario.  With parallel > 1 scenarios run in
    worker processes; results are deterministic regardless of scheduling.
    """
    configs = list(configs)
    if parallel <= 1 or len(configs) <= 1:
        return [_run_outcome(c) for c in configs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_run_outcome, configs))
