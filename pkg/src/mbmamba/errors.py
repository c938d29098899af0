class ConfigError(ValueError):
    """Invalid shapes, hyperparameters, or missing inputs."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during computation."""
