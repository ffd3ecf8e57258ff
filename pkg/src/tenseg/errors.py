"""Exception types shared across the package."""


class TensegError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(TensegError):
    """A model, config, or parameter set violates its invariants."""


class DegenerateGeometryError(TensegError):
    """Geometry too degenerate to operate on (coincident endpoints etc.)."""


class DivergenceError(TensegError):
    """Integration produced non-finite state; the timestep is too large."""


class MissingExchangeError(TensegError):
    """A ranging exchange was lost in transit and produced no measurement."""


class MalformedExchangeError(TensegError):
    """Timestamps of an exchange are inconsistent with the protocol."""


class ScheduleError(TensegError):
    """Broadcast slot schedule is invalid (e.g. duplicate module IDs)."""


class GradientSingularityError(TensegError):
    """Loss gradient undefined because two points coincide."""


class MissingPairError(TensegError):
    """Not enough co-visible samples to derive an offset for a pair."""


class CovarianceDegenerateError(TensegError):
    """Covariance not positive-definite even after conditioning."""


class PredictError(TensegError):
    """Sigma-point propagation failed during the filter time update."""


class StreamError(TensegError):
    """Measurement or control stream violates ordering requirements."""


class MetricsError(TensegError):
    """Metrics cannot be computed (e.g. empty overlap window)."""


class ScenarioError(TensegError):
    """A scenario run aborted; diagnostics in the message."""


class ExportError(TensegError):
    """An artifact file could not be written; path in the message."""
