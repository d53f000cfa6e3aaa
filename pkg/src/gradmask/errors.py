"""Structured exceptions shared across the package."""


class GradmaskError(Exception):
    """Base class for all package errors."""


class ShapeError(GradmaskError):
    """An op received operands with incompatible shapes."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(GradmaskError):
    """An op received values outside its mathematical domain."""

    def __init__(self, op, detail):
        self.op = op
        super().__init__(f"{op}: {detail}")


class DataFormatError(GradmaskError):
    """A dataset or checkpoint file is malformed."""


class CheckpointError(DataFormatError):
    """A model checkpoint failed validation on load."""


class TrainingDiverged(GradmaskError):
    """Training loss became non-finite."""

    def __init__(self, epoch, batch, loss_value):
        self.epoch = epoch
        self.batch = batch
        self.loss_value = loss_value
        super().__init__(
            f"non-finite training loss {loss_value!r} at epoch {epoch}, batch {batch}"
        )


class ProtocolError(GradmaskError):
    """An evaluation protocol precondition failed (e.g. nothing to attack)."""


class ConfigError(GradmaskError):
    """A run configuration is invalid or inconsistent."""
