"""Grouped empirical likelihood: estimation, testing, two-sample
comparisons, and sharded aggregation, with a simulation harness."""

from .core import (GelFit, TestResult, asymptotic_covariance, chisq_quantile,
                   chisq_sf, confidence_interval, el_estimate, gel_estimate,
                   gel_log_ratio, gel_test, profile_gradient)
from .distributed import (DgelFit, Shard, dgel_estimate, dgel_test,
                          partition_shards)
from .dual import DualSolution, check_convex_hull, log_star, solve_dual
from .estimators import DGELEstimator, GELEstimator, TwoSampleGEL
from .exceptions import (ArgumentError, BracketError, DomainError,
                         GelkitError, InfeasibleAtInit, InfeasibleError,
                         NonConvergence, NonFiniteError, ParseError,
                         SingularError)
from .grouping import Grouping, identity_grouping, make_grouping
from .models import (MomentModel, as_data_matrix, linreg_constrained_model,
                     mean_model, model_from_config,
                     normal_three_moment_model)
from .rng import splitmix64
from .simulate import (SimConfig, SimReport, dcel_estimate, gen_example1,
                       gen_example2, gen_example3, run_mse_study,
                       run_size_power_study, run_timing_bench)
from .two_sample import (TwoSampleFit, TwoSampleProblem, group_weights,
                         make_two_sample_problem, solve_two_sample_system,
                         two_sample_mean_test, two_sample_test)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "BracketError", "DGELEstimator", "DgelFit",
    "DomainError", "DualSolution", "GELEstimator", "GelFit", "GelkitError",
    "Grouping", "InfeasibleAtInit", "InfeasibleError", "MomentModel",
    "NonConvergence", "NonFiniteError", "ParseError", "Shard", "SimConfig",
    "SimReport", "SingularError", "TestResult", "TwoSampleFit",
    "TwoSampleGEL", "TwoSampleProblem", "as_data_matrix",
    "asymptotic_covariance", "check_convex_hull", "chisq_quantile",
    "chisq_sf", "confidence_interval", "dcel_estimate", "dgel_estimate",
    "dgel_test", "el_estimate", "gel_estimate", "gel_log_ratio", "gel_test",
    "gen_example1", "gen_example2", "gen_example3", "group_weights",
    "identity_grouping", "linreg_constrained_model",
    "make_grouping", "make_two_sample_problem", "mean_model",
    "model_from_config", "normal_three_moment_model", "partition_shards",
    "profile_gradient", "run_mse_study", "run_size_power_study",
    "run_timing_bench", "solve_dual", "solve_two_sample_system",
    "splitmix64", "two_sample_mean_test", "two_sample_test", "log_star",
    "__version__",
]
