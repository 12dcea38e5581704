# core/errors.py
"""Exception hierarchy shared by every simulator component."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimulationError):
    """Invalid configuration, cross-field inconsistency or missing referenced file."""


class GeoInputError(SimulationError, ValueError):
    """Non-finite or out-of-range coordinates, or inconsistent geographic thresholds."""


class ShapeError(SimulationError, ValueError):
    """Dimension mismatch between parameters, features and gradients."""


class ManifestError(SimulationError):
    """Malformed manifest or partition file."""


class UnusableQueryError(SimulationError):
    """A query has no candidate positives or no candidate negatives."""


class AggregationError(SimulationError):
    """Client updates cannot be combined (mismatched length, bad weights, non-finite values)."""


class EvaluationError(SimulationError):
    """Retrieval evaluation cannot be computed."""
