"""Custom exceptions for the desk3d asset generation toolkit."""

from typing import Optional


class Desk3DError(Exception):
    """Base exception for desk3d errors."""


class Desk3DValidationError(Desk3DError):
    """Raised when an argument or precondition is invalid."""


class Desk3DShapeError(Desk3DValidationError):
    """Raised when tensor or image shapes do not match."""


class Desk3DPromptError(Desk3DValidationError):
    """Raised when a prompt does not follow the prompt grammar.

    Attributes:
        token: The offending token (empty string at end of input)
        position: Byte offset of the offending token in the prompt text
    """

    def __init__(self, message: str = "", token: str = "", position: int = -1) -> None:
        super().__init__(message)
        self.token = token
        self.position = position


class Desk3DNumericalError(Desk3DError):
    """Raised when a forward operation produces NaN or Inf values."""


class Desk3DGradientError(Desk3DError):
    """Raised when backward or an optimizer step cannot proceed."""


class Desk3DCheckpointError(Desk3DError):
    """Raised when a checkpoint is missing, corrupt or not trained."""


class Desk3DDatasetError(Desk3DError):
    """Raised when a dataset is empty or its files cannot be read or written."""


class Desk3DMeshError(Desk3DError):
    """Raised when mesh processing cannot proceed (non-manifold input, atlas overflow)."""


class Desk3DStageError(Desk3DError):
    """Raised when a pipeline stage fails.

    Attributes:
        stage: Name of the failed stage
    """

    def __init__(self, message: str = "", stage: Optional[str] = None) -> None:
        super().__init__(message)
        self.stage = stage
