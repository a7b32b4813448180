"""Exception hierarchy shared by all gp2f modules.

Each class carries the process exit code the command line maps it to.
"""

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INGESTION = 3
EXIT_NUMERIC = 4
EXIT_ASSUMPTION = 5


class GP2FError(Exception):
    exit_code = EXIT_FAILURE


class UsageError(GP2FError):
    exit_code = EXIT_USAGE


class ConfigError(GP2FError):
    exit_code = EXIT_USAGE


class IngestionError(GP2FError):
    exit_code = EXIT_INGESTION


class ParseError(IngestionError):
    """malformed input line; the message names file and line number"""


class ValidationError(IngestionError):
    """well-formed input that breaks a data invariant"""


class ProtocolError(GP2FError):
    """infeasible evaluation protocol (e.g. too few nodes of a class)"""


class ContractError(GP2FError):
    """a caller broke a documented precondition (e.g. unfrozen encoder)"""


class NumericError(GP2FError):
    exit_code = EXIT_NUMERIC


class DimensionError(NumericError):
    pass


class AssumptionError(GP2FError):
    exit_code = EXIT_ASSUMPTION


def with_context(error, context):
    """Return a copy of `error` (same class) whose message is prefixed by `context`."""
    try:
        return type(error)(f'{context}: {error}')
    except TypeError:
        return GP2FError(f'{context}: {error}')
