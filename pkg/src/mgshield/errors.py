"""Shared error classes with distinct CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration, scenario file, or CLI arguments (exit code 2)."""

    exit_code = 2


class DataError(Exception):
    """Bad dataset, model file, or stream contents (exit code 3)."""

    exit_code = 3


class RuntimeFailure(Exception):
    """Failure while running (diverged training, broken transport; exit code 4)."""

    exit_code = 4
