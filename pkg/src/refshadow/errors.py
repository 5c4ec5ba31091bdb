"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions disagree."""


class ConfigError(ValueError):
    """A configuration value violates its invariant."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class SequencingError(ValueError):
    """Clip indices pushed out of order."""


class DatasetError(ValueError):
    """Manifest or on-disk dataset is malformed."""


class CheckpointError(ValueError):
    """Checkpoint contents disagree with the model configuration."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
