"""Exception types shared across the package."""


class GamDesignError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(GamDesignError):
    pass


class DegenerateCovariate(GamDesignError):
    pass


class KnotCountTooLarge(GamDesignError):
    pass


class InvalidParameter(GamDesignError):
    pass


class SimulationOverflow(GamDesignError):
    def __init__(self, message, draw_index=None):
        super().__init__(message)
        self.draw_index = draw_index


class LikelihoodUnderflow(GamDesignError):
    pass


class NumericalSingularity(GamDesignError):
    pass


class EvidenceUndefined(GamDesignError):
    pass


class NotPositiveDefinite(GamDesignError):
    pass


class EstimationFailed(GamDesignError):
    pass


class EfficiencyUndefined(GamDesignError):
    pass


class TransectOutOfBounds(GamDesignError):
    pass


class MissingCovariate(GamDesignError):
    pass


class ConfigError(GamDesignError):
    pass
