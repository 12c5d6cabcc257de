"""Exception types shared across the package."""


class RobustLabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(RobustLabError, ValueError):
    """Tensor shapes do not compose for the requested operation."""


class ContractViolation(RobustLabError, ValueError):
    """An operation was called outside its documented contract."""


class ConfigurationError(RobustLabError, ValueError):
    """A model spec, training config, or run config is invalid."""


class CheckpointError(RobustLabError, ValueError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class IngestError(RobustLabError, ValueError):
    """A dataset manifest row or image file could not be ingested."""

    def __init__(self, row: int, message: str):
        super().__init__(f"manifest row {row}: {message}")
        self.row = row


class TrainingDiverged(RobustLabError, RuntimeError):
    """Training hit a non-finite loss; carries the offending step's diagnostics."""

    def __init__(self, epoch: int, batch: int, components: dict):
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} ({parts})")
        self.epoch = epoch
        self.batch = batch
        self.components = components
