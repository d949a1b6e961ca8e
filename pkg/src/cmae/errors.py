"""Error types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration, CLI arguments, or dataset layout (exit code 1)."""
