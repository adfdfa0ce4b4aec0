"""Exception hierarchy for the LW-DNA pipeline."""

from typing import Optional, Sequence


class LwdnaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LwdnaError, ValueError):
    """Operand shapes do not fit an operation."""

    def __init__(self, op: str, message: str, shapes: Optional[Sequence[tuple]] = None):
        self.op = op
        self.shapes = list(shapes or [])
        report = f" (shapes: {', '.join(str(tuple(s)) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{op}: {message}{report}")


class TapeError(LwdnaError):
    """Misuse of the recording tape (double backward, non-scalar loss, no tape)."""


class ConfigError(LwdnaError, ValueError):
    """Invalid architecture, channel configuration or run parameter."""


class InfeasibleBudgetError(LwdnaError):
    """The floor-only configuration already exceeds the FLOP budget."""

    def __init__(self, floor_flops: int, target_flops: int):
        self.floor_flops = floor_flops
        self.target_flops = target_flops
        super().__init__(
            f"infeasible FLOP budget: floor configuration needs {floor_flops} FLOPs "
            f"but the target is {target_flops}"
        )


class EmptyLayerError(LwdnaError):
    """A layer would lose every channel."""

    def __init__(self, layer_id: str):
        self.layer_id = layer_id
        super().__init__(f"layer '{layer_id}' retains no channels")


class DataFormatError(LwdnaError):
    """A dataset file is malformed."""

    def __init__(self, path: str, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {message} at byte offset {offset}")


class TrainingDivergedError(LwdnaError):
    """The training loss became NaN or infinite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"loss diverged ({loss}) at epoch {epoch}, batch {batch}")


class ProtocolMismatchError(LwdnaError):
    """Two runs that must share a training protocol do not."""


class OutputExistsError(LwdnaError):
    """An output file exists and overwriting was not requested."""
