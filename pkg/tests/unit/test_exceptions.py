import pytest

from exceptions import (
    ArtifactError,
    ConfigError,
    DataError,
    InvalidArgumentError,
    InvalidStateError,
    NodeGamError,
    NonAdditivityError,
    NumericalError,
    SchemaError,
)


class TestNodeGamError:
    """Tests for NodeGamError."""

    def test_basic_exception(self):
        """Test basic exception creation."""
        exc = NodeGamError("Test error")
        assert str(exc) == "Test error"
        assert exc.message == "Test error"
        assert exc.context == {}

    def test_exception_with_context(self):
        """Test exception with context."""
        exc = NodeGamError("Test error", {"key": "value"})
        assert "key=value" in str(exc)
        assert exc.context == {"key": "value"}


class TestExitCodes:
    """Each error family maps to one process exit code."""

    @pytest.mark.parametrize("cls,code", [
        (NodeGamError, 1),
        (InvalidArgumentError, 1),
        (InvalidStateError, 1),
        (ConfigError, 1),
        (SchemaError, 2),
        (DataError, 2),
        (ArtifactError, 2),
        (NumericalError, 3),
        (NonAdditivityError, 3),
    ])
    def test_exit_code(self, cls, code):
        exc = cls("failure")
        assert isinstance(exc, NodeGamError)
        assert exc.exit_code == code

    def test_non_additivity_is_numerical(self):
        """Test NonAdditivityError can be caught as NumericalError."""
        with pytest.raises(NumericalError):
            raise NonAdditivityError("not additive", {"max_gap": 0.1})
