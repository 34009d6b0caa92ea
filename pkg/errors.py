"""Exception hierarchy shared by the colorizer modules.

Every class carries the process exit code the CLI reports for it:
2 for usage/config/data problems, 3 for runtime and numeric failures.
"""

EXIT_OK      = 0
EXIT_USAGE   = 2
EXIT_RUNTIME = 3


class ColorizerError(Exception):
    exit_code = EXIT_RUNTIME


class UsageError(ColorizerError):
    exit_code = EXIT_USAGE


class ConfigError(UsageError):
    pass


class DatasetError(UsageError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ImageFormatError(DatasetError):
    def __init__(self, msg, path=None):
        super().__init__(msg)
        self.path = path


class ShapeError(ColorizerError, ValueError):
    pass


class NumericError(ColorizerError):
    def __init__(self, msg, component=None):
        super().__init__(msg)
        self.component = component


class CheckpointError(ColorizerError):
    pass


def exit_code_for(exc):
    if isinstance(exc, ColorizerError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, NotADirectoryError, PermissionError)):
        return EXIT_USAGE
    return EXIT_RUNTIME
