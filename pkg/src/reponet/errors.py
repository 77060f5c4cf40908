"""Exception hierarchy. CLI exit codes are attached to each class."""


class ReponetError(Exception):
    exit_code = 1


class ConfigError(ReponetError):
    exit_code = 2


class DataError(ReponetError):
    exit_code = 3


class NumericalError(ReponetError):
    exit_code = 4
