"""Collective and point anomaly detection in cross-correlated data."""

from .anomaly import PeltState, detect, point_saving, prune
from .bqp import BqpInstance, BqpSolution, brute_force_bqp, make_instance, solve_banded_bqp
from .changepoint import ChangepointResult, cpt_statistic, detect_multiple, detect_single
from .core import (
    AnomalySet,
    CollectiveAnomaly,
    ConvergenceError,
    DataMatrix,
    InvalidArgumentError,
    NumericalError,
    PenaltyScheme,
    PointAnomaly,
    PrecisionModel,
    SegmentWindow,
    default_penalties,
    penalty_of,
)
from .estimate import (
    RobustEstimates,
    estimate_model,
    gaussian_rank_correlation,
    robust_baseline,
    robust_covariance,
    structured_precision,
    whiten,
)
from .graph import NeighborhoodPlan, banded_adjacency, build_plan, lattice_adjacency, plan_for
from .saving import (
    SavingResult,
    SegmentStats,
    approx_saving,
    approximation_error_bound,
    build_anomaly_bqp,
    build_cpt_bqp,
    exact_saving,
    segment_stats,
    subset_mle,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
