"""Error types shared by the harness and the CLI."""


class ConfigError(ValueError):
    """A config file or flag value is unknown or out of range."""
