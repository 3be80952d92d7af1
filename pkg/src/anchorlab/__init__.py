"""Score distillation with an image-anchored source, on exactly solvable diffusion priors."""

from .guidance import GuidanceConfig, GuidanceResult
from .prior import Condition, GmmPrior
from .schedule import NoiseSchedule, make_schedule

__all__ = ["Condition", "GmmPrior", "GuidanceConfig", "GuidanceResult", "NoiseSchedule",
           "make_schedule"]
__version__ = "0.1.0"
