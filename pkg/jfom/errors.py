class FomError(Exception):
    """Base class of all jfom failures that are not plain bad arguments."""


class ConfigError(FomError, ValueError):
    """Malformed run configuration."""


class RolloutDivergence(FomError):
    """A rollout left the safety box or produced non-finite states."""


class InfeasibleCertificateError(FomError):
    """The dual update could not reach zero sampled violation."""


class ValidationError(FomError):
    """Declared tolerances are smaller than the sampled estimates."""


class ProvenanceError(FomError):
    """A primal pair does not come from the rollout it is checked against."""
