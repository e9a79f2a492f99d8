"""Exception hierarchy shared by all modules."""


class BayesDAError(Exception):
    """Base class for every error raised by this package."""


class MalformedTable(BayesDAError, ValueError):
    pass


class NegativeCount(MalformedTable):
    pass


class DuplicateId(MalformedTable):
    pass


class DegenerateDataset(BayesDAError, ValueError):
    """Too little data survives a filtering step to continue."""


class TreeMismatch(BayesDAError, ValueError):
    pass


class EmptySample(BayesDAError, ValueError):
    pass


class DegenerateQuantile(BayesDAError, ValueError):
    pass


class RleInadmissible(BayesDAError, ValueError):
    """No taxon is positive in every sample, so geometric means vanish."""


class TmmDegenerate(BayesDAError, ValueError):
    pass


class InvalidParameter(BayesDAError, ValueError):
    pass


class InconsistentState(BayesDAError, ValueError):
    pass


class ModelMismatch(BayesDAError, ValueError):
    pass


class NotApplicable(BayesDAError):
    pass


class Undefined(BayesDAError, ValueError):
    pass


class ConfigError(BayesDAError, ValueError):
    pass


class NonFiniteLikelihood(BayesDAError, FloatingPointError):
    """Raised when a chain produces a non-finite log-likelihood.

    ``dump`` holds a copy of the chain state at the time of failure.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
