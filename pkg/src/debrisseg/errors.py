"""Exception types shared across the toolkit."""


class DebrisSegError(Exception):
    """Base class for all toolkit errors."""


class UngeoreferencedInputError(DebrisSegError):
    def __init__(self, path, field):
        self.path = path
        self.field = field
        super().__init__(f"ungeoreferenced input: {path} (missing {field})")


class EmptyInputError(DebrisSegError):
    pass


class BoundsError(DebrisSegError):
    pass


class ConfigurationError(DebrisSegError):
    pass


class CoverageError(DebrisSegError):
    def __init__(self, gaps, overlaps):
        self.gaps = list(gaps)
        self.overlaps = list(overlaps)
        parts = []
        if self.gaps:
            parts.append(f"gaps: {self.gaps}")
        if self.overlaps:
            parts.append(f"overlaps: {self.overlaps}")
        super().__init__("tile coverage error; " + "; ".join(parts))


class ShapeError(DebrisSegError, ValueError):
    pass


class ContractError(DebrisSegError, ValueError):
    pass


class MaskEncodingError(DebrisSegError):
    pass


class IncompleteError(DebrisSegError):
    def __init__(self, message, image_ids=()):
        self.image_ids = sorted(image_ids)
        if self.image_ids:
            message = f"{message}: {', '.join(self.image_ids)}"
        super().__init__(message)


class TrainingPreconditionError(DebrisSegError):
    pass


class NonFiniteLossError(DebrisSegError):
    def __init__(self, epoch, batch, lr, loss):
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:.3e}"
        )


class BackendError(DebrisSegError):
    pass


class DecodeError(DebrisSegError):
    pass


class CheckpointWriteError(DebrisSegError):
    def __init__(self, path, last_good, cause):
        self.path, self.last_good = path, last_good
        super().__init__(f"failed to write checkpoint {path} ({cause}); last good checkpoint: {last_good}")
