"""Threshold-manipulation detection toolkit for longitudinal panels.

Builds annualized-change intervals from repeated running-variable
measurements (CD4 counts), fits cluster-robust DID and fixed-effects
regressions around a qualification cutoff, sweeps placebo thresholds,
tests for density discontinuities, and generates synthetic cohorts with
known injected manipulation for validation.
"""

from .density import DensityTestResult, build_histogram, mccrary_test
from .design import (Continuous, DesignMatrix, Dummies, Interaction,
                     RegressionSpec, build_design, extend_design,
                     filter_collinear)
from .errors import ConfigError, DataError, ThresholdGapError
from .fit import FitResult, fit_fe, fit_ols, fit_spec
from .panel import (PanelDataset, annotate_intervals, build_intervals,
                    filter_population, interval_frame, load_observations,
                    load_persons, start_bins, trim_outliers)
from .recipes import (BinProfile, SweepResult, run_bin_recovery_stats,
                      run_binned_interactions, run_did, run_law_change,
                      run_threshold_sweep, run_time_between)
from .synthgen import SimConfig, describe_truth, generate_panel

__version__ = "0.1.0"

__all__ = [
    "BinProfile", "ConfigError", "Continuous", "DataError",
    "DensityTestResult", "DesignMatrix", "Dummies", "FitResult",
    "Interaction", "PanelDataset", "RegressionSpec", "SimConfig",
    "SweepResult", "ThresholdGapError", "annotate_intervals",
    "build_design", "build_histogram", "build_intervals", "describe_truth",
    "extend_design", "filter_collinear", "filter_population", "fit_fe",
    "fit_ols", "fit_spec", "generate_panel", "interval_frame",
    "load_observations", "load_persons", "mccrary_test",
    "run_bin_recovery_stats", "run_binned_interactions", "run_did",
    "run_law_change", "run_threshold_sweep", "run_time_between",
    "start_bins", "trim_outliers",
]
