"""Exception types shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or invalid combination of settings. Exit code 2."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact (dataset, checkpoint) is absent. Exit code 3."""


class NumericalFault(ArithmeticError):
    """Training or evaluation produced a non-finite value. Exit code 4."""
