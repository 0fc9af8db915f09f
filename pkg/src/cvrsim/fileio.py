"""File formats and result emission.

All formats are line-oriented decimal text with a versioned header line;
numbers are written with 12 significant digits and emission is deterministic
for fixed inputs, so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .inverter import DEFAULT_CURVE, InverterLimits, MODES, PvUnit, VoltVarCurve
from .metrics import SummaryMetrics, summarize
from .network import (
    Bus,
    FeederNetwork,
    LineSegment,
    Phase,
    SubstationTransformer,
    parse_phases,
    phases_to_str,
    validate_radial,
)
from .scenario import TimeSeriesResult
from .zipload import ZipLoad

FEEDER_HEADER = "cvrsim-feeder v1"
PROFILES_HEADER = "cvrsim-profiles v1"
HOURS_HEADER = "cvrsim-hours v1"
SUMMARY_HEADER = "cvrsim-summary v1"
VOLTAGES_HEADER = "cvrsim-voltages v1"

HOURS_COLUMNS = (
    "hour,tap_a,tap_b,tap_c,sub_v_a,sub_v_b,sub_v_c,load_p_kw,load_q_kvar,"
    "pv_p_kw,pv_q_kvar,losses_kw,source_p_kw,source_q_kvar,v_min,v_max,feasible"
)


def fmt(x: float) -> str:
    return format(float(x), ".12g")


def fmt_complex(z: complex) -> str:
    sign = "+" if z.imag >= 0 else "-"
    return f"{fmt(z.real)}{sign}{fmt(abs(z.imag))}j"


class FeederParseError(ValueError):
    """Parse/validation failure with file, line and field context."""

    def __init__(self, path, line_no: int | None, field: str, message: str):
        self.path = str(path)
        self.line_no = line_no
        self.field = field
        where = f"{self.path}:{line_no}" if line_no is not None else self.path
        super().__init__(f"{where}: field '{field}': {message}")


def _parse_kv(path, line_no: int, tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise FeederParseError(path, line_no, tok, "expected key=value")
        key, value = tok.split("=", 1)
        if key in out:
            raise FeederParseError(path, line_no, key, "duplicate field")
        out[key] = value
    return out


def _need(fields: dict[str, str], key: str, path, line_no: int) -> str:
    if key not in fields:
        raise FeederParseError(path, line_no, key, "missing required field")
    return fields[key]


def _to_float(text: str, field: str, path, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise FeederParseError(path, line_no, field, f"not a number: {text!r}") from None


def _to_complex(text: str, field: str, path, line_no: int) -> complex:
    try:
        return complex(text)
    except ValueError:
        raise FeederParseError(path, line_no, field, f"not a complex number: {text!r}") from None


def _parse_triple(text: str, field: str, path, line_no: int) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise FeederParseError(path, line_no, field, "expected three comma-separated values")
    return tuple(_to_float(p, field, path, line_no) for p in parts)  # type: ignore[return-value]


def _parse_curve(text: str, path, line_no: int) -> VoltVarCurve:
    pairs = text.split(",")
    if len(pairs) != 4:
        raise FeederParseError(path, line_no, "curve", "expected four v:q pairs")
    points = []
    for pair in pairs:
        if ":" not in pair:
            raise FeederParseError(path, line_no, "curve", f"bad point {pair!r}")
        v, q = pair.split(":", 1)
        points.append((_to_float(v, "curve", path, line_no),
                       _to_float(q, "curve", path, line_no)))
    try:
        return VoltVarCurve(points=tuple(points))
    except ValueError as exc:
        raise FeederParseError(path, line_no, "curve", str(exc)) from None


def load_feeder(path) -> FeederNetwork:
    """Parse a feeder description file and validate radial structure."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != FEEDER_HEADER:
        raise FeederParseError(path, 1, "header", f"expected {FEEDER_HEADER!r}")
    buses: list[Bus] = []
    segs: list[LineSegment] = []
    loads: list[ZipLoad] = []
    pv: list[PvUnit] = []
    transformer: SubstationTransformer | None = None
    source: str | None = None
    mva_base = 10.0
    for line_no, raw in enumerate(lines[1:], start=2):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        kind, fields = tokens[0], _parse_kv(path, line_no, tokens[1:])
        try:
            if kind == "system":
                mva_base = _to_float(_need(fields, "mva_base", path, line_no),
                                     "mva_base", path, line_no)
            elif kind == "transformer":
                taps = (0, 0, 0)
                if "taps" in fields:
                    taps = tuple(int(t) for t in
                                 _parse_triple(fields["taps"], "taps", path, line_no))
                transformer = SubstationTransformer(
                    rating_kva=_to_float(_need(fields, "rating_kva", path, line_no),
                                         "rating_kva", path, line_no),
                    primary_kv=_to_float(_need(fields, "primary_kv", path, line_no),
                                         "primary_kv", path, line_no),
                    secondary_kv=_to_float(_need(fields, "secondary_kv", path, line_no),
                                           "secondary_kv", path, line_no),
                    tap_positions=taps,
                )
            elif kind == "source":
                source = _need(fields, "bus", path, line_no)
            elif kind == "bus":
                buses.append(Bus(
                    id=_need(fields, "id", path, line_no),
                    phases=parse_phases(_need(fields, "phases", path, line_no)),
                    base_voltage=_to_float(_need(fields, "v_base_v", path, line_no),
                                           "v_base_v", path, line_no),
                    feeder_id=fields.get("feeder", "main"),
                    distance_from_substation=_to_float(fields.get("dist_mi", "0"),
                                                       "dist_mi", path, line_no),
                ))
            elif kind == "line":
                entries = _need(fields, "z_ohm_per_mi", path, line_no).split(",")
                if len(entries) != 9:
                    raise FeederParseError(path, line_no, "z_ohm_per_mi",
                                           f"expected 9 entries, got {len(entries)}")
                z = np.array([_to_complex(e, "z_ohm_per_mi", path, line_no)
                              for e in entries]).reshape(3, 3)
                segs.append(LineSegment(
                    id=_need(fields, "id", path, line_no),
                    from_bus=_need(fields, "from", path, line_no),
                    to_bus=_need(fields, "to", path, line_no),
                    length=_to_float(_need(fields, "length_mi", path, line_no),
                                     "length_mi", path, line_no),
                    z_per_mile=z,
                ))
            elif kind == "load":
                zp, ip, pp = _parse_triple(fields.get("zip_p", "0.5,0.3,0.2"),
                                           "zip_p", path, line_no)
                zq, iq, pq = _parse_triple(fields.get("zip_q", "0.5,0.3,0.2"),
                                           "zip_q", path, line_no)
                loads.append(ZipLoad(
                    bus=_need(fields, "bus", path, line_no),
                    phase=Phase.parse(_need(fields, "phase", path, line_no)),
                    p0=_to_float(_need(fields, "p0_kw", path, line_no),
                                 "p0_kw", path, line_no),
                    q0=_to_float(fields.get("q0_kvar", "0"), "q0_kvar", path, line_no),
                    zp=zp, ip=ip, pp=pp, zq=zq, iq=iq, pq=pq,
                    v0=_to_float(fields.get("v0", "1"), "v0", path, line_no),
                ))
            elif kind == "pv":
                mode = fields.get("mode", "pf")
                if mode not in MODES:
                    raise FeederParseError(path, line_no, "mode",
                                           f"unknown mode {mode!r}")
                curve = (_parse_curve(fields["curve"], path, line_no)
                         if "curve" in fields else DEFAULT_CURVE)
                peak_kw = _to_float(_need(fields, "peak_kw", path, line_no),
                                    "peak_kw", path, line_no)
                kva = _to_float(fields.get("kva", fmt(peak_kw)), "kva", path, line_no)
                pv.append(PvUnit(
                    bus=_need(fields, "bus", path, line_no),
                    phases=parse_phases(_need(fields, "phases", path, line_no)),
                    peak_kw=peak_kw,
                    limits=InverterLimits(kva=kva),
                    mode=mode,
                    curve=curve,
                ))
            else:
                raise FeederParseError(path, line_no, kind, "unknown record kind")
        except FeederParseError:
            raise
        except ValueError as exc:
            raise FeederParseError(path, line_no, kind, str(exc)) from None
    if transformer is None:
        raise FeederParseError(path, None, "transformer", "missing transformer record")
    if source is None:
        raise FeederParseError(path, None, "source", "missing source record")
    try:
        network = FeederNetwork(buses=tuple(buses), lines=tuple(segs),
                                transformer=transformer, source_bus=source,
                                loads=tuple(loads), pv_units=tuple(pv),
                                mva_base=mva_base)
    except ValueError as exc:
        raise FeederParseError(path, None, "network", str(exc)) from None
    report = validate_radial(network)
    if not report.ok:
        raise FeederParseError(path, None, "network",
                               "not radial: " + "; ".join(report.messages))
    return network


def feeder_text(network: FeederNetwork) -> str:
    """Serialize a feeder to the description format (deterministic)."""
    out = [FEEDER_HEADER]
    out.append(f"system mva_base={fmt(network.mva_base)}")
    t = network.transformer
    taps = ",".join(str(x) for x in t.tap_positions)
    out.append(
        f"transformer rating_kva={fmt(t.rating_kva)} primary_kv={fmt(t.primary_kv)} "
        f"secondary_kv={fmt(t.secondary_kv)} taps={taps}"
    )
    out.append(f"source bus={network.source_bus}")
    for b in network.buses:
        out.append(
            f"bus id={b.id} feeder={b.feeder_id} phases={phases_to_str(b.phases)} "
            f"v_base_v={fmt(b.base_voltage)} dist_mi={fmt(b.distance_from_substation)}"
        )
    for l in network.lines:
        z = ",".join(fmt_complex(l.z_per_mile[i, j]) for i in range(3) for j in range(3))
        out.append(
            f"line id={l.id} from={l.from_bus} to={l.to_bus} "
            f"length_mi={fmt(l.length)} z_ohm_per_mi={z}"
        )
    for d in network.loads:
        out.append(
            f"load bus={d.bus} phase={d.phase.name} p0_kw={fmt(d.p0)} "
            f"q0_kvar={fmt(d.q0)} zip_p={fmt(d.zp)},{fmt(d.ip)},{fmt(d.pp)} "
            f"zip_q={fmt(d.zq)},{fmt(d.iq)},{fmt(d.pq)} v0={fmt(d.v0)}"
        )
    for u in network.pv_units:
        curve = ",".join(f"{fmt(v)}:{fmt(q)}" for v, q in u.curve.points)
        out.append(
            f"pv bus={u.bus} phases={phases_to_str(u.phases)} peak_kw={fmt(u.peak_kw)} "
            f"kva={fmt(u.limits.kva)} mode={u.mode} curve={curve}"
        )
    return "\n".join(out) + "\n"


def save_feeder(network: FeederNetwork, path) -> None:
    Path(path).write_text(feeder_text(network))


def default_profiles_path() -> Path:
    return Path(resources.files("cvrsim").joinpath("data/profiles_default.csv"))  # type: ignore[arg-type]


SCENARIO_KEYS = {"feeder", "profiles", "allocation", "penetration_pct", "mode",
                 "cvr", "seed", "snapshot_hour"}


def load_scenario_file(path) -> dict:
    """Read a scenario configuration JSON file into a flat settings dict.

    Recognized keys: feeder (path or 'synthetic'), profiles (path or
    'default'), allocation, penetration_pct, mode, cvr, seed, snapshot_hour.
    Command-line flags override these values.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederParseError(path, exc.lineno, "json", exc.msg) from None
    if not isinstance(doc, dict) or doc.get("format") != "cvrsim-scenario":
        raise FeederParseError(path, 1, "format", "expected format 'cvrsim-scenario'")
    if doc.get("version") != 1:
        raise FeederParseError(path, 1, "version", f"unsupported version {doc.get('version')!r}")
    unknown = set(doc) - SCENARIO_KEYS - {"format", "version"}
    if unknown:
        raise FeederParseError(path, None, ",".join(sorted(unknown)), "unknown key")
    return {k: doc[k] for k in SCENARIO_KEYS if k in doc}


def load_profiles(path) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Read hourly load/PV multipliers: 24 rows of hour,load,pv."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != PROFILES_HEADER:
        raise FeederParseError(path, 1, "header", f"expected {PROFILES_HEADER!r}")
    rows = [l for l in lines[1:] if l.strip() and not l.strip().startswith("#")]
    if rows and rows[0].strip().startswith("hour"):
        rows = rows[1:]
    if len(rows) != 24:
        raise FeederParseError(path, None, "rows", f"expected 24 rows, got {len(rows)}")
    load: list[float] = []
    pv: list[float] = []
    for i, row in enumerate(rows):
        line_no = lines.index(row) + 1
        parts = [p.strip() for p in row.split(",")]
        if len(parts) != 3:
            raise FeederParseError(path, line_no, "row", "expected hour,load,pv")
        hour = int(_to_float(parts[0], "hour", path, line_no))
        if hour != i:
            raise FeederParseError(path, line_no, "hour", f"expected hour {i}, got {hour}")
        lm = _to_float(parts[1], "load_multiplier", path, line_no)
        pm = _to_float(parts[2], "pv_multiplier", path, line_no)
        if lm < 0:
            raise FeederParseError(path, line_no, "load_multiplier", "must be >= 0")
        if not 0.0 <= pm <= 1.0:
            raise FeederParseError(path, line_no, "pv_multiplier", "must lie in [0, 1]")
        load.append(lm)
        pv.append(pm)
    return tuple(load), tuple(pv)


def save_profiles(load: Sequence[float], pv: Sequence[float], path) -> None:
    rows = [PROFILES_HEADER, "hour,load_multiplier,pv_multiplier"]
    for h in range(24):
        rows.append(f"{h},{fmt(load[h])},{fmt(pv[h])}")
    Path(path).write_text("\n".join(rows) + "\n")


@dataclass(frozen=True)
class RunManifest:
    run_dir: Path
    files: tuple[tuple[str, str], ...]  # (name, sha256)
    tool_version: str
    run_key: str

    def verify(self) -> bool:
        for name, digest in self.files:
            target = self.run_dir / name
            if not target.exists():
                return False
            if hashlib.sha256(target.read_bytes()).hexdigest() != digest:
                return False
        return True


def _config_descriptor(config) -> dict:
    return {
        "allocation": config.allocation.value,
        "penetration_pct": config.penetration_pct,
        "mode": config.mode,
        "cvr": config.cvr_enabled,
        "seed": config.seed,
        "load_profile": [fmt(x) for x in config.load_profile],
        "pv_profile": [fmt(x) for x in config.pv_profile],
        "feeder_sha256": hashlib.sha256(feeder_text(config.feeder).encode()).hexdigest(),
    }


def _hours_text(result: TimeSeriesResult) -> str:
    rows = [HOURS_HEADER, HOURS_COLUMNS]
    for h in result.hours:
        rows.append(",".join([
            str(h.hour),
            str(h.taps[0]), str(h.taps[1]), str(h.taps[2]),
            fmt(h.substation_v[0]), fmt(h.substation_v[1]), fmt(h.substation_v[2]),
            fmt(h.load_p_kw), fmt(h.load_q_kvar),
            fmt(h.pv_p_kw), fmt(h.pv_q_kvar),
            fmt(h.losses_kw),
            fmt(h.source_p_kw), fmt(h.source_q_kvar),
            fmt(h.v_min), fmt(h.v_max),
            "1" if h.feasible else "0",
        ]))
    return "\n".join(rows) + "\n"


def _summary_text(metrics: SummaryMetrics) -> str:
    rows = [SUMMARY_HEADER]
    rows.append(f"total_customer_energy_kwh={fmt(metrics.total_customer_energy_kwh)}")
    rows.append(f"total_line_loss_energy_kwh={fmt(metrics.total_line_loss_energy_kwh)}")
    for name, value in zip("abc", metrics.mean_substation_voltage):
        rows.append(f"mean_substation_voltage_{name}={fmt(value)}")
    rows.append(
        f"mean_substation_voltage={fmt(metrics.mean_substation_voltage_overall)}"
    )
    rows.append(f"v_min={fmt(metrics.v_min)}")
    rows.append(f"v_max={fmt(metrics.v_max)}")
    hours = ",".join(str(h) for h in metrics.infeasible_hours)
    rows.append(f"infeasible_hours={hours}")
    factor = "" if metrics.cvr_factor is None else fmt(metrics.cvr_factor)
    rows.append(f"cvr_factor={factor}")
    return "\n".join(rows) + "\n"


def _voltages_text(result: TimeSeriesResult, hour: int) -> str:
    rows = [VOLTAGES_HEADER, f"# hour={hour}", "bus,phase,v_pu"]
    record = result.hours[hour]
    for i, bus in enumerate(result.bus_ids):
        for ph in range(3):
            if result.phase_mask[i, ph]:
                rows.append(f"{bus},{'ABC'[ph]},{fmt(record.bus_v[i, ph])}")
    return "\n".join(rows) + "\n"


def read_hours_file(path) -> list[dict[str, float]]:
    """Parse a per-hour results file back into numeric rows."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != HOURS_HEADER:
        raise FeederParseError(path, 1, "header", f"expected {HOURS_HEADER!r}")
    if len(lines) < 2 or lines[1].strip() != HOURS_COLUMNS:
        raise FeederParseError(path, 2, "columns", "unexpected column layout")
    columns = HOURS_COLUMNS.split(",")
    rows = []
    for line_no, row in enumerate(lines[2:], start=3):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != len(columns):
            raise FeederParseError(path, line_no, "row",
                                   f"expected {len(columns)} columns")
        rows.append({c: _to_float(p, c, path, line_no) for c, p in zip(columns, parts)})
    return rows


def emit_results(results: Sequence[TimeSeriesResult], output_dir,
                 snapshot_hour: int = 13, force: bool = False,
                 config_path: str | None = None) -> RunManifest:
    """Write per-hour tables, summaries and a voltage snapshot per scenario.

    Creates one directory keyed by the hash of all scenario configs under
    ``output_dir``; refuses to overwrite an existing run unless ``force``.
    """
    if not 0 <= snapshot_hour < 24:
        raise ValueError("snapshot hour must lie in [0, 24)")
    output_dir = Path(output_dir)
    descriptor = json.dumps(
        {"scenarios": [_config_descriptor(r.config) for r in results],
         "snapshot_hour": snapshot_hour},
        sort_keys=True,
    )
    run_key = hashlib.sha256(descriptor.encode()).hexdigest()[:12]
    run_dir = output_dir / f"run_{run_key}"
    if run_dir.exists() and not force:
        raise FileExistsError(
            f"{run_dir} already exists (same configuration); use force to overwrite"
        )
    run_dir.mkdir(parents=True, exist_ok=True)

    files: list[tuple[str, str]] = []

    def write(name: str, text: str) -> None:
        data = text.encode()
        (run_dir / name).write_bytes(data)
        files.append((name, hashlib.sha256(data).hexdigest()))

    # CVR runs whose no-CVR twin is in the same batch get their factor filled
    bases = [r for r in results if not r.config.cvr_enabled]

    def paired_base(result):
        if not result.config.cvr_enabled:
            return None
        for base in bases:
            if base.config.same_study(result.config):
                return base
        return None

    for result in results:
        label = result.config.label()
        base = paired_base(result)
        try:
            metrics = summarize(result, base)
        except ValueError:  # infeasible hours or zero voltage delta
            metrics = summarize(result)
        write(f"{label}_hours.csv", _hours_text(result))
        write(f"{label}_summary.txt", _summary_text(metrics))
        write(f"{label}_voltages_h{snapshot_hour:02d}.csv",
              _voltages_text(result, snapshot_hour))

    manifest = RunManifest(run_dir=run_dir, files=tuple(files),
                           tool_version=__version__, run_key=run_key)
    manifest_doc = {
        "format": "cvrsim-manifest",
        "version": 1,
        "tool_version": __version__,
        "run_key": run_key,
        "descriptor_sha256": hashlib.sha256(descriptor.encode()).hexdigest(),
        "config_path": config_path,
        "scenarios": [{"label": r.config.label(), "seed": r.config.seed}
                      for r in results],
        "files": [{"name": n, "sha256": d} for n, d in files],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest_doc, indent=2,
                                                      sort_keys=True) + "\n")
    return manifest
