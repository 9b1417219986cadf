"""Exception hierarchy shared by the library and the command line front end."""


class FermiCavityError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FermiCavityError, ValueError):
    """Invalid or inconsistent configuration values."""

    exit_code = 2


class IncompatibleSolverError(FermiCavityError):
    """Solver cannot handle the requested regime / quantization pair."""

    exit_code = 3


class NumericalError(FermiCavityError, RuntimeError):
    """Norm drift, step-size underflow or another numerical breakdown."""

    exit_code = 4
