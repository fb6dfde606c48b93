"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """An argument violates an operation's preconditions."""


class BehindCameraError(ValueError):
    """A point or box corner with non-positive depth cannot be projected."""


class FormatError(ValueError):
    """A file does not follow its expected on-disk format."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateInputError(ValueError):
    """Input geometry has too little extent to process (e.g. collinear points)."""


class NotFoundError(LookupError):
    """A requested id is absent from the data."""


class PlacementError(RuntimeError):
    """Scene generation exhausted its retry budget while placing objects."""


class UndefinedRecallError(ValueError):
    """Recall is undefined because there is no valid ground truth."""
