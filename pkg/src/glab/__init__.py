"""Classifier-free guidance laboratory on analytic Gaussian-mixture priors."""

from glab.errors import (
    DegenerateStepError,
    GlabError,
    InvariantError,
    ParameterError,
    ScheduleIndexError,
    SingularityError,
    StepError,
)
from glab.guidance import Cfg, CfgPP, ScheduledCfg, Uncond
from glab.schedule import NoiseSchedule, TimestepGrid, build_schedule, uniform_grid
from glab.score_model import Class, GaussianMixtureModel, Null, Subset, ring_model

__version__ = "0.1.0"

__all__ = [
    "Cfg",
    "CfgPP",
    "Class",
    "DegenerateStepError",
    "GaussianMixtureModel",
    "GlabError",
    "InvariantError",
    "NoiseSchedule",
    "Null",
    "ParameterError",
    "ScheduleIndexError",
    "ScheduledCfg",
    "SingularityError",
    "StepError",
    "Subset",
    "TimestepGrid",
    "Uncond",
    "build_schedule",
    "ring_model",
    "uniform_grid",
]
