"""
Exception hierarchy for the SpikingCSINet codec, trainer and CLI.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class SpikingCSINetError(Exception):
    """Base exception for codec, pipeline and training errors."""

    exit_code: int = 1

    def __init__(self, message: str, exit_code: Optional[int] = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(SpikingCSINetError):
    """Invalid configuration or violated precondition."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor or channel shapes do not line up."""
    pass


class ContractError(ConfigError):
    """A spike frame that should be binary is not."""
    pass


class DataFormatError(SpikingCSINetError):
    """A dataset or checkpoint file could not be decoded."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataFormatError):
    """Checkpoint version or configuration mismatch."""
    pass


class NumericError(SpikingCSINetError):
    """Non-finite values appeared at a layer boundary."""

    exit_code = 4

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class TrainingAborted(NumericError):
    """Training stopped on a non-finite loss or activation."""

    def __init__(self, epoch: int, batch: int, layer: Optional[str], detail: str):
        super().__init__(
            f"Training aborted at epoch {epoch}, batch {batch}, layer {layer or 'loss'}: {detail}",
            layer=layer,
        )
        self.epoch = epoch
        self.batch = batch


class MetricError(SpikingCSINetError):
    """A metric is undefined for the given inputs."""

    exit_code = 4


class TapeStateError(SpikingCSINetError):
    """Gradient tape or feedback trace used in an invalid state."""
    pass


class RangeError(ConfigError):
    """A step index or schedule position outside its valid range."""
    pass
