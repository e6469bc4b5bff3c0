"""Controlled rectified-flow inversion on Gaussian toy problems.

LQR-guided forward/reverse ODEs and their equivalent SDEs, DDIM/DDPM
baselines, exact Gaussian moment oracles, and the inversion study.
"""

__version__ = "0.1.0"

from .control import GuidanceSchedule, schedule_preset
from .core import DEFAULT_DELTA, GaussianDist, PathBundle, TimeGrid, Trajectory, gaussian_sample, gaussian_score
from .experiments import (
    InversionConfig,
    InversionReport,
    SimulationConfig,
    run_inversion_roundtrip,
    run_simulation,
    run_table5,
    straightness,
)
from .fields import (
    InterpolationMarginal,
    VectorField,
    analytic_marginal_field,
    conditional_lqr_field,
    field_from_score,
    marginal_at,
    score_from_field,
    tweedie_posterior_mean_y0,
)
from .simulate import ProcessSpec, reverse_of, run_process

__all__ = [
    "DEFAULT_DELTA",
    "GaussianDist",
    "GuidanceSchedule",
    "InterpolationMarginal",
    "InversionConfig",
    "InversionReport",
    "PathBundle",
    "ProcessSpec",
    "SimulationConfig",
    "TimeGrid",
    "Trajectory",
    "VectorField",
    "__version__",
    "analytic_marginal_field",
    "conditional_lqr_field",
    "field_from_score",
    "gaussian_sample",
    "gaussian_score",
    "marginal_at",
    "reverse_of",
    "run_inversion_roundtrip",
    "run_process",
    "run_simulation",
    "run_table5",
    "schedule_preset",
    "score_from_field",
    "straightness",
    "tweedie_posterior_mean_y0",
]
