class TrainingError(Exception):
    pass


class EmptyDatasetError(TrainingError, ValueError):
    """Training or evaluation was handed a dataset without examples."""


class SnapshotError(TrainingError, OSError):
    """A parameter snapshot is truncated or not in the expected layout."""
