"""Exception hierarchy. Every domain failure derives from VesselCycleError."""


class VesselCycleError(Exception):
    """Base class for all domain errors raised by the toolkit."""


class DimensionError(VesselCycleError, ValueError):
    pass


class ConfigError(VesselCycleError, ValueError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class IngestError(VesselCycleError, OSError):
    pass


class ManifestError(VesselCycleError, ValueError):
    pass


class SamplingError(VesselCycleError, ValueError):
    pass


class DataError(VesselCycleError, ValueError):
    pass


class NumericError(VesselCycleError, ArithmeticError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class CheckpointError(VesselCycleError):
    pass


class MetricError(VesselCycleError, ValueError):
    pass
