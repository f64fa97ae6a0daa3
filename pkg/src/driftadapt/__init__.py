"""Online adaptation of small differentiable time-series predictors.

The package is organized as a plain numpy/scipy library:

* :mod:`driftadapt.models` - a zoo of one-step predictors with exact
  reverse-mode Jacobians and feedback rollout.
* :mod:`driftadapt.adapters` - forgetting-factor Kalman parameter updates,
  their exponential-moving-average variants, stochastic-gradient baselines,
  and a recursive least-squares reference.
* :mod:`driftadapt.multiepoch` - per-sample epoch scheduling driven by
  prediction-error thresholds, with quantile calibration.
* :mod:`driftadapt.data` - synthetic drifting time series, windowing,
  splitting, and CSV round-trips.
* :mod:`driftadapt.harness` - the online adaptation loop, offline training,
  metrics, and the benchmark matrix.
* :mod:`driftadapt.cli` - the ``driftadapt`` command line front end.
"""

from .errors import (
    ConfigError,
    NumericsError,
    ParseError,
    TrainingError,
    UnsupportedModelError,
)
from .params import AdaptableMask, Block, ParameterVector
from .models import (
    LinearPredictor,
    MlpPredictor,
    Predictor,
    RecurrentPredictor,
    fd_jacobian,
    flatten_params,
    load_model,
    make_model,
    save_model,
)
from .adapters import (
    AdapterState,
    GradHyper,
    Innovation,
    KalmanHyper,
    RlsHyper,
    adam_step,
    amsgrad_step,
    make_adapter,
    mekf_ema_step,
    mekf_step,
    momentum_step,
    rls_step,
    sgd_step,
)
from .multiepoch import (
    DmeThresholds,
    ErrorBandCriterion,
    FixedEpochCriterion,
    RandomEpochCriterion,
    calibrate_thresholds,
    dme_adapt,
    epochs_for_sample,
    make_criterion,
)
from .data import (
    DriftConfig,
    Regime,
    Sample,
    Trajectory,
    drift_linear_config,
    gen_drifting_series,
    read_csv,
    split,
    windowize,
    write_csv,
)
from .harness import (
    PredictionLog,
    RunResult,
    accuracy,
    collect_validation_errors,
    mse,
    mse_squared,
    offline_train,
    run_matrix,
    run_online_adaptation,
)
from .config import default_config, validate_config

__all__ = [
    "AdaptableMask", "AdapterState", "Block", "ConfigError", "DmeThresholds",
    "DriftConfig", "ErrorBandCriterion", "FixedEpochCriterion", "GradHyper",
    "Innovation", "KalmanHyper", "LinearPredictor", "MlpPredictor",
    "NumericsError", "ParameterVector", "ParseError", "PredictionLog",
    "Predictor", "RandomEpochCriterion", "RecurrentPredictor", "Regime",
    "RlsHyper", "RunResult", "Sample", "Trajectory", "TrainingError",
    "UnsupportedModelError", "accuracy", "adam_step", "amsgrad_step",
    "calibrate_thresholds", "collect_validation_errors", "default_config",
    "dme_adapt", "drift_linear_config", "epochs_for_sample", "fd_jacobian",
    "flatten_params", "gen_drifting_series", "load_model", "make_adapter",
    "make_criterion", "make_model", "mekf_ema_step", "mekf_step",
    "momentum_step", "mse", "mse_squared", "offline_train", "read_csv",
    "rls_step", "run_matrix", "run_online_adaptation", "save_model",
    "sgd_step", "split", "validate_config", "windowize", "write_csv",
]
