"""Bandit change-point detection under sampling control.

TSSRP monitors K streams while observing only q per step. It keeps
Shiryaev-Roberts-type local statistics and picks the next layout by
prior-randomized scores. TRAS is the CUSUM-based baseline.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .baselines import TrasConfig
from .calibration import CalibrationReport, calibrate_threshold, estimate_arl
from .detector import (
    Detector,
    DetectorConfig,
    LocalState,
    RuleKind,
    RunResult,
    SensorLayout,
    StepOutcome,
    StoppingRule,
    global_statistic,
    randomized_score,
    run,
    select_layout,
    update_local,
)
from .errors import CalibrationError, ConfigError, DataError, ProtocolError, StateError, TssrpError
from .models import Gaussian, StreamModel, StudentT, log_likelihood_ratio, sample
from .priors import PointMass, PriorSpec, Tabulated, Uniform, draw, preset
from .sim import (
    HOT_FORMING,
    BayesNetSpec,
    ExperimentReport,
    Scenario,
    build_procedure,
    generate_hot_forming,
    generate_panel,
    run_experiment,
)

__all__ = [
    "BayesNetSpec", "CalibrationError", "CalibrationReport", "ConfigError", "DataError", "Detector",
    "DetectorConfig", "ExperimentReport", "Gaussian", "HOT_FORMING", "LocalState", "PointMass", "PriorSpec",
    "ProtocolError", "RuleKind", "RunResult", "Scenario", "SensorLayout", "StateError", "StepOutcome",
    "StoppingRule", "StreamModel", "StudentT", "Tabulated", "TrasConfig", "TssrpError", "Uniform",
    "build_procedure", "calibrate_threshold", "draw", "estimate_arl", "generate_hot_forming",
    "generate_panel", "global_statistic", "log_likelihood_ratio", "preset", "randomized_score", "run",
    "run_experiment", "sample", "select_layout", "update_local",
]
