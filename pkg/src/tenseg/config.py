"""Scenario configuration: nested dataclass schema, YAML files, overrides.

Every knob has a default, every default can be overridden from a YAML file
or an in-memory dict, and the fully resolved configuration can be echoed
back out so a run is reproducible from its output directory alone.
"""

from dataclasses import dataclass, field, asdict

import yaml

from .errors import ValidationError

SCENARIOS = ("local", "global")
SETTINGS = ("full", "no_imu", "full_const_offset", "anchors_4")


@dataclass
class ModelConfig:
    """Structure parameters passed through to the six-strut builder."""

    rod_length: float = 1.5
    bar_stiffness: float = 3000.0
    cable_stiffness: float = 400.0
    bar_damping: float = 40.0
    cable_damping: float = 10.0
    node_mass: float = 0.5
    cable_prestrain: float = 0.08


@dataclass
class RateConfig:
    dynamics_hz: float = 1000.0
    round_hz: float = 15.0
    bundle_hz: float = 10.0

    def __post_init__(self):
        if min(self.dynamics_hz, self.round_hz, self.bundle_hz) <= 0:
            raise ValidationError("rates must be positive")
        if self.bundle_hz > self.round_hz:
            raise ValidationError("bundles cannot outpace ranging rounds")


@dataclass
class AnchorLayoutConfig:
    """Fixed-module survey: a jittered ring covering roughly 91 m^2.

    Eight anchors sit on the corners and edge midpoints of an x_span by
    y_span rectangle (9.5 x 9.6 m by default) at seeded random heights, so
    a robot near the middle is always inside the hull. Explicit positions
    override the generated ring.
    """

    count: int = 8
    x_span: float = 9.5
    y_span: float = 9.6
    z_min: float = 0.3
    z_max: float = 2.6
    xy_jitter: float = 0.3
    positions: list | None = None

    def __post_init__(self):
        if self.count < 4:
            raise ValidationError("at least four anchors are required")
        if self.z_min >= self.z_max:
            raise ValidationError("anchor z_min must be below z_max")


@dataclass
class SensorNoiseConfig:
    """Simulated radio and IMU imperfections (see ranging.NoiseModel)."""

    sigma_t: float = 5.9e-10
    p_loss: float = 0.0
    p_nlos: float = 0.0
    nlos_bias_mean: float = 0.5
    gate_threshold: float = 0.65
    clock_skew_ppm: float = 30.0
    imu_sigma: float | None = None  # None -> sqrt(lambda_theta)


@dataclass
class OffsetConfig:
    """True antenna-delay distance offsets are drawn uniformly per pair."""

    low: float = 0.0
    high: float = 0.5

    def __post_init__(self):
        if self.low > self.high:
            raise ValidationError("offset range is inverted")


@dataclass
class FilterConfig:
    """Estimator tuning; lambda_* keep the hand-tuned reference values."""

    alpha: float = 0.0139
    beta: float = 2.0
    kappa: float = 0.0
    lambda_y: float = 0.4
    lambda_theta: float = 0.1
    lambda_r: float = 0.029
    pos_noise: float | None = 1e-5
    vel_noise: float | None = 1e-3
    jitter: float = 1e-9
    # Matches the truth integrator step. Sigma-point batches hit the stiff
    # friction ramp harder than the nominal trajectory, so the filter gets no
    # slack on step size; 2e-3 is only conditionally stable under rocking
    # contact and the failures are silent covariance blow-ups.
    sub_dt: float = 1e-3
    gimbal_limit_deg: float = 85.0
    mount_offset: float = 0.1
    init_pos_var: float = 1.0
    init_vel_var: float = 1.0


@dataclass
class ActuationConfig:
    """What the motors do.

    Local runs drive two cables with phase-shifted stepwise sinusoids
    (sampled and held every `hold` seconds). Global runs replay a scripted
    rest-length schedule from `script_path` (YAML, see data/roll.yaml).
    """

    cables: list | None = None       # member indices; None picks two defaults
    amplitude: float = 0.18          # fractional rest-length contraction
    period: float = 8.0
    phase_shift: float = 0.25        # fraction of a period between the two
    hold: float = 0.5
    start: float = 5.0
    script_path: str | None = None

    def __post_init__(self):
        if not 0 <= self.amplitude < 0.9:
            raise ValidationError("amplitude must be a fraction in [0, 0.9)")
        if self.period <= 0 or self.hold <= 0:
            raise ValidationError("period and hold must be positive")


@dataclass
class ScenarioConfig:
    scenario: str = "local"
    setting: str = "full"
    duration: float = 60.0
    settle: float = 10.0
    seed: int = 0
    spurious_imu_time: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    rates: RateConfig = field(default_factory=RateConfig)
    anchors: AnchorLayoutConfig = field(default_factory=AnchorLayoutConfig)
    noise: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    offsets: OffsetConfig = field(default_factory=OffsetConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    actuation: ActuationConfig = field(default_factory=ActuationConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(
                f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.setting not in SETTINGS:
            raise ValidationError(
                f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.duration <= 0:
            raise ValidationError("duration must be positive")
        if not 0 <= self.settle < self.duration:
            raise ValidationError("settle window must fit inside the run")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


_NESTED = {
    "model": ModelConfig,
    "rates": RateConfig,
    "anchors": AnchorLayoutConfig,
    "noise": SensorNoiseConfig,
    "offsets": OffsetConfig,
    "filter": FilterConfig,
    "actuation": ActuationConfig,
}


def config_from_dict(data: dict) -> ScenarioConfig:
    """Resolve a (possibly partial) dict against the defaults."""
    base = asdict(ScenarioConfig())
    merged = _merge(base, data or {})
    kwargs = {}
    for key, value in merged.items():
        if key in _NESTED:
            kwargs[key] = _NESTED[key](**value)
        else:
            kwargs[key] = value
    return ScenarioConfig(**kwargs)


def load_config(path=None, **overrides) -> ScenarioConfig:
    """Load YAML (optional), then apply keyword overrides on top.

    Overrides use top-level field names only (scenario, setting, seed, ...);
    None values are ignored so CLI flags can pass through unset options.
    """
    data = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"config root must be a mapping: {path}")
        data = loaded
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return config_from_dict(data)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def dump_config(cfg: ScenarioConfig, path) -> None:
    """Echo the fully resolved configuration (seed included)."""
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
