"""Unit tests for desk3d exceptions."""

import pytest

from desk3d import (
    Desk3DCheckpointError,
    Desk3DDatasetError,
    Desk3DError,
    Desk3DGradientError,
    Desk3DMeshError,
    Desk3DNumericalError,
    Desk3DPromptError,
    Desk3DShapeError,
    Desk3DStageError,
    Desk3DValidationError,
)

ALL_EXCEPTIONS = [
    Desk3DError,
    Desk3DValidationError,
    Desk3DShapeError,
    Desk3DPromptError,
    Desk3DNumericalError,
    Desk3DGradientError,
    Desk3DCheckpointError,
    Desk3DDatasetError,
    Desk3DMeshError,
    Desk3DStageError,
]


class TestExceptionHierarchy:
    """Test suite for exception hierarchy."""

    def test_base_exception_inheritance(self):
        """Test that all desk3d exceptions inherit from Desk3DError."""
        for exc_class in ALL_EXCEPTIONS:
            assert issubclass(exc_class, Desk3DError)
        assert issubclass(Desk3DError, Exception)

    def test_validation_family(self):
        """Test that shape and prompt errors are validation errors."""
        assert issubclass(Desk3DShapeError, Desk3DValidationError)
        assert issubclass(Desk3DPromptError, Desk3DValidationError)
        assert not issubclass(Desk3DMeshError, Desk3DValidationError)

    def test_exception_instantiation(self):
        """Test that all exceptions can be instantiated with and without a message."""
        for exc_class in ALL_EXCEPTIONS:
            exc = exc_class("Test message")
            assert str(exc) == "Test message"
            assert isinstance(exc_class(), exc_class)

    def test_exception_chaining(self):
        """Test exception chaining with 'from' clause."""
        original_error = OSError("disk full")

        with pytest.raises(Desk3DDatasetError) as exc_info:
            try:
                raise original_error
            except OSError as e:
                raise Desk3DDatasetError("Asset 3: cannot write") from e

        assert exc_info.value.__cause__ is original_error


class TestExceptionAttributes:
    """Test suite for exceptions that carry extra context."""

    def test_prompt_error_token_and_position(self):
        """Test that prompt errors carry the offending token and byte position."""
        exc = Desk3DPromptError("bad token", token="dodecahedron", position=9)
        assert exc.token == "dodecahedron"
        assert exc.position == 9
        assert str(exc) == "bad token"

    def test_prompt_error_defaults(self):
        """Test prompt error defaults when no context is given."""
        exc = Desk3DPromptError()
        assert exc.token == ""
        assert exc.position == -1

    def test_stage_error_names_stage(self):
        """Test that stage errors carry the stage name."""
        exc = Desk3DStageError("extract failed", stage="extract")
        assert exc.stage == "extract"
        assert Desk3DStageError().stage is None

    def test_catch_as_base(self):
        """Test that specific errors are caught through the base class."""
        with pytest.raises(Desk3DError):
            raise Desk3DStageError("boom", stage="bake")
