"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to build the
diagnostic line and choose an exit code.
"""


class CamwordsError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(CamwordsError, ValueError):
    category = "config"
    exit_code = 2


class ParameterError(CamwordsError, ValueError):
    category = "parameter"
    exit_code = 2


class ShapeError(CamwordsError, ValueError):
    category = "shape"
    exit_code = 3


class FormatError(CamwordsError):
    category = "format"
    exit_code = 4


class ContractError(CamwordsError):
    category = "contract"
    exit_code = 5


class InitializationError(CamwordsError):
    category = "init"
    exit_code = 5


class ScheduleError(CamwordsError):
    category = "schedule"
    exit_code = 5


class NonFiniteLossError(CamwordsError, FloatingPointError):
    category = "numeric"
    exit_code = 6

    def __init__(self, component, step, value):
        super().__init__(f"non-finite loss component {component!r} = {value} at step {step}")
        self.component = component
        self.step = step
