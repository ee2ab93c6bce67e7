"""Exception hierarchy. Each class carries a distinct process exit code
so the CLI can map failures to stable, scriptable codes."""


class KneeUdaError(Exception):
    exit_code = 1


class ConfigError(KneeUdaError):
    """Invalid configuration, rule set, or argument combination."""
    exit_code = 2


class BalancingError(KneeUdaError):
    """Dataset balancing is impossible (no positives / too few negatives)."""
    exit_code = 3


class LocalizationError(KneeUdaError):
    """ROI localization failed (e.g. all-background mask)."""
    exit_code = 4


class MetricError(KneeUdaError):
    """A metric is undefined on the given input (e.g. one-class AUROC)."""
    exit_code = 5


class ManifestError(KneeUdaError):
    exit_code = 6


class ManifestMissingFile(ManifestError):
    exit_code = 7


class ManifestDuplicateId(ManifestError):
    exit_code = 8


class ManifestMalformed(ManifestError):
    exit_code = 9


class CheckpointError(KneeUdaError):
    """Checkpoint missing, malformed, or incompatible with the model config."""
    exit_code = 10
