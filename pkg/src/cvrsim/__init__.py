"""Quasi-static time-series simulation of conservation voltage reduction
on radial distribution feeders with solar PV."""

__version__ = "0.1.0"

from .inverter import (  # noqa: F401
    DEFAULT_CURVE,
    MODE_PF,
    MODE_VOLT_VAR,
    InverterLimits,
    PvUnit,
    VoltVarCurve,
)
from .network import (  # noqa: F401
    Bus,
    FeederNetwork,
    LineSegment,
    OltcConfig,
    Phase,
    SubstationTransformer,
    sweep_order,
    tap_to_ratio,
    validate_radial,
)
from .oltc import CvrConstraints, run_timestep, select_minimal_taps  # noqa: F401
from .powerflow import (  # noqa: F401
    PowerFlowSolution,
    SolveOptions,
    TimeInputs,
    compute_losses,
    oracle_solve,
    solve_snapshot,
    solve_with_inverter_control,
)
from .scenario import (  # noqa: F401
    AllocationKind,
    ScenarioConfig,
    SynthesisParams,
    TimeSeriesResult,
    allocate_pv,
    run_matrix,
    run_scenario,
    synthesize_feeder,
)
from .zipload import ZipLoad, evaluate, sensitivity  # noqa: F401
