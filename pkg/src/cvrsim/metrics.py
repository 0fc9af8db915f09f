"""Post-processing of time-series runs into the study's evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import TimeSeriesResult


class CvrFactorUndefined(ValueError):
    """Raised when the voltage reduction between two runs is zero."""


@dataclass(frozen=True)
class SummaryMetrics:
    total_customer_energy_kwh: float
    total_line_loss_energy_kwh: float
    mean_substation_voltage: tuple[float, float, float]
    mean_substation_voltage_overall: float
    v_min: float
    v_max: float
    infeasible_hours: tuple[int, ...]
    # filled only when a paired no-CVR base run is available
    cvr_factor: float | None = None

    def __post_init__(self) -> None:
        if self.total_customer_energy_kwh < 0 or self.total_line_loss_energy_kwh < -1e-9:
            raise ValueError("energies must be non-negative")
        for v in (self.v_min, self.v_max, *self.mean_substation_voltage):
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"voltage {v} outside the [0, 2] sanity band")


def total_energy(result: TimeSeriesResult) -> float:
    """Customer energy over the day in kWh (PV output excluded by definition).

    Left-rectangle integration at the 1 h resolution of the run.
    """
    return float(sum(h.load_p_kw for h in result.hours))


def loss_energy(result: TimeSeriesResult) -> float:
    """Series line-loss energy over the day in kWh."""
    return float(sum(h.losses_kw for h in result.hours))


def mean_substation_voltage(result: TimeSeriesResult) -> tuple[np.ndarray, float]:
    """Day-mean substation |V| per phase and phase-averaged overall."""
    sub = result.substation_voltages()
    per_phase = sub.mean(axis=0)
    return per_phase, float(per_phase.mean())


def _load_weighted_mean_voltage(result: TimeSeriesResult) -> float:
    weights = np.zeros_like(result.phase_mask, dtype=float)
    index = {b: i for i, b in enumerate(result.bus_ids)}
    for load in result.network.loads:
        weights[index[load.bus], load.phase.index] += load.p0
    total = weights.sum()
    if total == 0:
        raise ValueError("load-weighted voltage needs a loaded network")
    hourly = [float((h.bus_v * weights).sum() / total) for h in result.hours]
    return float(np.mean(hourly))


def summarize(result: TimeSeriesResult,
              base: TimeSeriesResult | None = None) -> SummaryMetrics:
    """Daily metrics for one run; pass the matching no-CVR run as ``base``
    to also fill the CVR factor."""
    per_phase, overall = mean_substation_voltage(result)
    factor = cvr_factor(base, result) if base is not None else None
    return SummaryMetrics(
        total_customer_energy_kwh=total_energy(result),
        total_line_loss_energy_kwh=loss_energy(result),
        mean_substation_voltage=tuple(float(x) for x in per_phase),
        mean_substation_voltage_overall=overall,
        v_min=float(min(h.v_min for h in result.hours)),
        v_max=float(max(h.v_max for h in result.hours)),
        infeasible_hours=result.infeasible_hours,
        cvr_factor=factor,
    )


def cvr_factor(base: TimeSeriesResult, cvr: TimeSeriesResult,
               voltage_basis: str = "substation") -> float:
    """Percent energy reduction divided by percent voltage reduction.

    ``base`` is the run without CVR, ``cvr`` the one with it; the two configs
    must agree in everything but the CVR flag and both must be fully
    feasible.  The voltage reduction is measured at the substation by
    default; ``voltage_basis='load_weighted'`` averages over customers
    instead.
    """
    if not base.config.same_study(cvr.config):
        raise ValueError("runs differ in more than the CVR flag")
    if base.config.cvr_enabled or not cvr.config.cvr_enabled:
        raise ValueError("expected (base without CVR, run with CVR)")
    if base.infeasible_hours or cvr.infeasible_hours:
        raise ValueError("cvr_factor requires fully feasible runs")
    e_base = total_energy(base)
    e_cvr = total_energy(cvr)
    if e_base == 0:
        raise ValueError("base energy is zero")
    if voltage_basis == "substation":
        v_base = mean_substation_voltage(base)[1]
        v_cvr = mean_substation_voltage(cvr)[1]
    elif voltage_basis == "load_weighted":
        v_base = _load_weighted_mean_voltage(base)
        v_cvr = _load_weighted_mean_voltage(cvr)
    else:
        raise ValueError(f"unknown voltage basis {voltage_basis!r}")
    dv_pct = (v_base - v_cvr) / v_base * 100.0
    if dv_pct == 0:
        raise CvrFactorUndefined("voltage reduction is zero; factor undefined")
    de_pct = (e_base - e_cvr) / e_base * 100.0
    return de_pct / dv_pct


@dataclass(frozen=True)
class VoltageDistribution:
    """All bus-phase |V| at one hour, sorted ascending, with summary stats."""

    values: np.ndarray
    v_min: float
    v_max: float
    mean: float
    spread: float


def voltage_distribution(result: TimeSeriesResult, hour: int) -> VoltageDistribution:
    if not 0 <= hour < 24:
        raise ValueError(f"hour must lie in [0, 24), got {hour}")
    record = result.hours[hour]
    values = np.sort(record.bus_v[result.phase_mask])
    return VoltageDistribution(
        values=values,
        v_min=float(values.min()),
        v_max=float(values.max()),
        mean=float(values.mean()),
        spread=float(values.max() - values.min()),
    )
