"""Exception types shared across the simulator."""


class ConfigError(Exception):
    """Bad scenario / run configuration (CLI exit code 2)."""


class NumericalError(Exception):
    """Numerical failure that invalidates a run (CLI exit code 3)."""
