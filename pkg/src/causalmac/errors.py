"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or file (CLI exit code 1)."""


class ContractError(ValueError):
    """Caller violated an operation's precondition (bad shapes, out-of-range ids)."""


class UsageError(RuntimeError):
    """Operation invoked in a state where it is not defined (e.g. stepping a done episode)."""
