"""Pipeline failure classes, mapped to CLI exit codes."""
from tgdm.net import CheckpointError, ConfigError
from tgdm.phantom import PhantomError
from tgdm.topo import TopologyError
from tgdm.volgrid import GridError


class DataError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DATA_ERRORS = (DataError, GridError, PhantomError, TopologyError, CheckpointError, FileNotFoundError)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    raise exc
