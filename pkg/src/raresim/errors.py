"""Exception hierarchy shared by all raresim modules."""


class RaresimError(Exception):
    """Base class for all errors raised by raresim."""


class ModelEvaluationError(RaresimError):
    """A drift block or the diffusion matrix produced an unusable value."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class EllipticityError(RaresimError):
    """sigma sigma^T fell below the declared floor where that is fatal."""


class SimulationError(RaresimError):
    def __init__(self, message, step=None, t=None):
        super().__init__(message)
        self.step = step
        self.t = t


class EstimationError(RaresimError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class DegenerateEstimatorError(EstimationError):
    """The estimated mean is zero, so ratios against it are undefined."""




class SolverError(RaresimError):
    def __init__(self, message, t_index=None, node=None):
        super().__init__(message)
        self.t_index = t_index
        self.node = node


class ConfigError(RaresimError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class CacheInvalidError(RaresimError):
    """A cached field does not match the model it is being loaded for."""


class FieldParseError(RaresimError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class StabilityError(ConfigError):
    """Grid/time-step combination violates the explicit scheme's CFL bound."""

    def __init__(self, message, constraint=None):
        super().__init__(message, field="grid")
        self.constraint = constraint
