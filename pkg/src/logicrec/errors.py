"""Exception types shared across the package."""


class LogicRecError(Exception):
    """Base class for all package-specific errors."""


class ParseError(LogicRecError):
    """A data file line could not be parsed."""


class SchemaError(LogicRecError):
    """An entity or relation violates the declared schema."""


class ConfigError(LogicRecError):
    """A configuration value is out of its legal range."""


class TrainingError(LogicRecError):
    """Training diverged; the message carries the epoch or step index."""


class GenerationError(LogicRecError):
    """A synthetic-graph spec is infeasible."""


class OracleScaleError(LogicRecError):
    """A brute-force oracle was asked to enumerate beyond its guard."""
