"""Exception types shared across the package."""


class DistRewardError(Exception):
    """Base class for all package errors."""


class InvalidInput(DistRewardError, ValueError):
    pass


class NotPSD(DistRewardError, ValueError):
    """A matrix expected to be positive semi-definite has a clearly negative eigenvalue."""


class AllTied(DistRewardError):
    """Every reward in a batch is identical, so no positive/negative split exists."""


class TrainingDiverged(DistRewardError, RuntimeError):
    """Loss became non-finite. ``last_good`` holds the last finite parameter snapshot."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class RewardEvaluationError(DistRewardError):
    """A set reward failed while the greedy split was evaluating a tentative swap."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
