import click


class ConfigurationError(click.ClickException):
    """
    Raised when a configuration is invalid or inconsistent with the data it is
    applied to (group sizes, intervals, pilot budgets, weights, config hashes).
    """


class InputError(click.ClickException):
    """Raised when a call receives inputs of the wrong shape or range."""
