"""Reward fine-tuning of a toy conditional diffusion model with instance and distributional rewards."""

from .diversity import vendi_score
from .errors import AllTied, DistRewardError, InvalidInput, NotPSD, RewardEvaluationError, TrainingDiverged
from .gauss_stats import GaussStats, accumulate_stats, frechet_distance, merge_stats

__all__ = [
    "AllTied", "DistRewardError", "GaussStats", "InvalidInput", "NotPSD", "RewardEvaluationError",
    "TrainingDiverged", "accumulate_stats", "frechet_distance", "merge_stats", "vendi_score",
]
__version__ = "0.1.0"
