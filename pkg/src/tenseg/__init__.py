"""Tensegrity robot simulation, ranging, calibration, and state estimation."""

from .structure import TensegrityModel, build_superball, member_geometry, validate_model
from .dynamics import (
    BatchState,
    Environment,
    GroundModel,
    StateVector,
    accelerations,
    force_densities,
    ground_forces,
    member_nodal_forces,
    settle,
    step,
    step_batch,
)
from .ranging import (
    ClockModel,
    ModuleSpec,
    NoiseModel,
    OffsetTable,
    ProtocolTiming,
    RangingMeasurement,
    TimestampSet,
    broadcast_round,
    distance_estimate,
    local_timestamp,
    nlos_gate,
    sensor_position,
    tof_estimate,
    twr_exchange,
)
from .calibration import (
    CalibrationConfig,
    CalibrationDataset,
    CalibrationProblem,
    calibrate,
    internal_offsets,
    loss_gradient,
    residual,
    total_loss,
)
from .ukf import (
    Belief,
    MeasurementBundle,
    SensorLayout,
    TensegrityFilter,
    UkfParams,
    initial_belief,
    measurement_model,
    predict,
    run_filter,
    sigma_points,
    update,
)
from .config import ScenarioConfig, load_config, dump_config
from .scenario import ScenarioRun, collect_rangelog, run_scenario
from .metrics import RunMetrics, compute_metrics
from .export import export_run
from .plots import render_report

__version__ = "0.1.0"
