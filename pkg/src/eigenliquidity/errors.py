"""Exception hierarchy.

The CLI maps these onto exit codes: numerical failures exit 1, bad input
files exit 2, inconsistent configuration exits 3.
"""


class EigenLiquidityError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class NumericalError(EigenLiquidityError):
    """A solve, factorization or fit could not be carried out reliably."""

    exit_code = 1


class InputError(EigenLiquidityError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ConfigError(EigenLiquidityError, ValueError):
    """Invalid parameter combination."""

    exit_code = 3


class DegenerateTargetWarning(UserWarning):
    """Target has a component on a zero-risk mode; the optimum is not unique."""
