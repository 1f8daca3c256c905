"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``sepconv.cli``).
"""


class ParameterError(ValueError):
    """Invalid argument: bad shape, out-of-range value, malformed config."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise cannot proceed numerically."""


class StateError(RuntimeError):
    """An object was used in the wrong state (e.g. a stale activation cache)."""


class IntegrityError(IOError):
    """Stored data failed its checksum."""
