"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class RollingDiffusionError(Exception):
    exit_code = 1


class ConfigError(RollingDiffusionError, ValueError):
    """Invalid configuration, shape mismatch, or out-of-range argument."""

    exit_code = 2


class InvalidIntervalError(ConfigError):
    """A denoising interval with ``s >= t``."""


class NumericalError(RollingDiffusionError, ArithmeticError):
    exit_code = 3


class SingularityError(NumericalError):
    """Division by a vanishing noise coefficient."""


class ContractError(RollingDiffusionError, RuntimeError):
    """A caller violated a stateful precondition (stale cache, wrong window state)."""

    exit_code = 3


class DataIOError(RollingDiffusionError, OSError):
    exit_code = 4
