"""Exception types raised across the package."""


class ClusterNCError(ValueError):
    """Base class for all errors raised by clusternc."""


class ZeroNormRow(ClusterNCError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"row {index} has (near) zero norm")


class DimensionMismatch(ClusterNCError):
    pass


class EmptyInput(ClusterNCError):
    pass


class EmptyCluster(ClusterNCError):
    pass


class InvalidClusterCount(ClusterNCError):
    pass


class MissingPrototype(ClusterNCError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"no prototype for class {label!r}")


class NonPositiveTemperature(ClusterNCError):
    pass


class InvalidSchedule(ClusterNCError):
    pass


class InvalidImbalance(ClusterNCError):
    pass


class InfeasibleGeometry(ClusterNCError):
    pass


class InvalidConfig(ClusterNCError):
    pass


class DivergenceDetected(ClusterNCError):
    """A loss became non-finite; ``state`` holds the partial training state."""

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)
