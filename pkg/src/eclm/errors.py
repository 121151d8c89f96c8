"""Exception hierarchy shared by every subsystem.

Each error class maps to a distinct nonzero CLI exit code (see cli.py).
"""


class EclmError(Exception):
    """Base class for all package errors."""


class ConfigError(EclmError):
    """Invalid scenario/model configuration (bad value, unknown key)."""


class DimensionError(EclmError):
    """Tensor/layer shape mismatch."""


class GraphError(EclmError):
    """Autodiff misuse, e.g. backward on a loss detached from the tape."""


class RoutingError(EclmError):
    """Routing decision inconsistent with the model (bad module index)."""


class SpecError(EclmError):
    """Invalid sub-model spec (empty layer, unknown module index)."""


class InfeasibleBudgetError(EclmError):
    """Resource budget cannot fit even the forced minimum sub-model."""

    def __init__(self, dimension: str, needed: int, available: int):
        self.dimension = dimension
        self.needed = needed
        self.available = available
        super().__init__(
            f"budget infeasible in dimension '{dimension}': "
            f"need {needed}, have {available}"
        )


class StalenessError(EclmError):
    """Device update built against an outdated cloud model version."""


class DataError(EclmError):
    """Bad dataset input (empty set, parse failure, label out of range)."""


class CheckpointError(EclmError):
    """Corrupt or incompatible checkpoint document."""


class TrainingDivergedError(EclmError):
    """Loss became non-finite during an optimization loop."""
