"""Exception hierarchy.

Every error carries a short machine-parseable ``code`` and a process exit
status so the CLI can report failures uniformly.
"""


class RgbdSalError(Exception):
    code = "E_GENERIC"
    exit_status = 1


class ConfigError(RgbdSalError, ValueError):
    code = "E_CONFIG"
    exit_status = 2


class StageOrderError(ConfigError):
    """A prerequisite stage has not been run (missing checkpoint)."""

    code = "E_STAGE"
    exit_status = 3


class DataError(RgbdSalError, ValueError):
    code = "E_DATA"
    exit_status = 4


class TrainingError(RgbdSalError, RuntimeError):
    code = "E_TRAIN"
    exit_status = 5


class UsageError(RgbdSalError, ValueError):
    code = "E_USAGE"
    exit_status = 6
