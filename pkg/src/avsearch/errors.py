"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have inconsistent shapes or dimensions."""


class BundleMismatchError(ValueError):
    """A feature bundle does not carry exactly the expected feature spaces."""


class ConfigError(ValueError):
    """Invalid configuration value (margins, training settings, manifests)."""


class FormatError(ValueError):
    """Malformed file content; the message carries the location."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


class TrainingError(RuntimeError):
    """Training aborted; the message names the offending batch."""


class DegenerateSimilarityWarning(UserWarning):
    """A zero-norm vector was fed to a cosine similarity (result defined as 0)."""
