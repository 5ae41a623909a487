"""Exporter exceptions; exit codes mirror the consumer CLI convention."""


class ExportError(Exception):
    exit_code = 1


class ConfigError(ExportError):
    """Invalid export configuration."""

    exit_code = 2


class DataError(ExportError):
    """Unknown dataset or unwritable output."""

    exit_code = 3
