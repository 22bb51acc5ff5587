"""Exception hierarchy shared across the package."""


class PermeadiffError(Exception):
    """Base class for all package-specific errors."""


# substrate
class PackingFailed(PermeadiffError):
    """Target volume fraction not reached within the iteration budget."""


class InfeasibleSpec(PermeadiffError):
    """Sphere population specification can never satisfy the request."""


class EmptyInput(PermeadiffError):
    """An operation received an empty collection where data is required."""


class FormatError(PermeadiffError):
    """A persisted artifact cannot be parsed back."""


# engine
class GeometryError(PermeadiffError):
    """Membrane sub-event budget exhausted too often to trust the run."""


class ProtocolGridMismatch(PermeadiffError):
    """Protocol timings do not line up with the simulation time grid."""


# sequence
class UnknownPreset(PermeadiffError):
    """Requested protocol preset name does not exist."""


# signal / analysis
class EmptyEnsemble(PermeadiffError):
    """No walkers available for the requested estimate."""


class InsufficientBValues(PermeadiffError):
    """Not enough distinct b-values for a cumulant fit."""


class NonPositiveSignal(PermeadiffError):
    """Signal values must be positive to take logarithms."""


class InsufficientSamples(PermeadiffError):
    """Not enough samples beyond the requested time cutoff."""


# fitting
class NoConvergence(PermeadiffError):
    """No optimization restart converged."""


class DegenerateSignal(PermeadiffError):
    """Signal carries no information to fit (constant for all measurements)."""


class SingularDictionary(PermeadiffError):
    """Dictionary matrix is unusable for non-negative least squares."""


class MismatchedKeys(PermeadiffError):
    """Fit results and ground truth tables do not line up."""


# cli
class ConfigError(PermeadiffError):
    """Experiment configuration file is invalid."""


class StageFailure(PermeadiffError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
