"""Exception hierarchy shared by every module."""


class RatiogateError(Exception):
    """Base class for all library errors."""


class InputError(RatiogateError, ValueError):
    """An argument is malformed (non-finite values, wrong shapes, bad ranges)."""


class StructuralError(RatiogateError, KeyError):
    """A lookup failed because the referenced entity is absent."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(RatiogateError, ValueError):
    """Hyperparameters violate a documented constraint."""


class NonFiniteError(RatiogateError, FloatingPointError):
    """A numerical evaluation produced NaN or infinity."""
