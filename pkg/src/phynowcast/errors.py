"""Exception types shared across the package."""


class InvalidKernelError(ValueError):
    pass


class InvalidOrderError(ValueError):
    pass


class DomainTooSmallError(ValueError):
    pass


class DimensionError(ValueError):
    """Tensor shapes disagree with each other or with the configuration."""


class ArityError(ValueError):
    """Wrong number of frames supplied to a sequence operation."""


class InfeasibleSplitError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass
