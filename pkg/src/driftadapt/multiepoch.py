"""Per-sample epoch scheduling for online adaptation.

Instead of consuming every sample exactly once, a criterion maps the
one-step prediction error to an epoch count: small errors ("easy" samples)
get one update, mid-range errors ("hard" samples) get two, and errors past
an upper threshold are treated as anomalies and skipped entirely. The two
thresholds are calibrated as nearest-rank quantiles of errors collected on
a validation stream.

Each inner epoch recomputes the prediction from the partially-updated
parameters and applies a full adapter step, advancing the optimizer's
internal state (covariance, step buffer, moments) along with the
parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import Innovation
from .errors import ConfigError


@dataclass(frozen=True)
class DmeThresholds:
    """Easy/hard boundary ``xi1`` and hard/anomaly boundary ``xi2``."""

    xi1: float
    xi2: float

    def __post_init__(self):
        if not (0 <= self.xi1 <= self.xi2):
            raise ConfigError("thresholds must satisfy 0 <= xi1 <= xi2")


@dataclass(frozen=True)
class ErrorBandCriterion:
    """Error-threshold banding: 1 epoch below xi1, 2 below xi2, skip above."""

    thresholds: DmeThresholds

    def epochs(self, error_norm: float) -> int:
        if error_norm >= self.thresholds.xi2:
            return 0
        if error_norm >= self.thresholds.xi1:
            return 2
        return 1


@dataclass(frozen=True)
class FixedEpochCriterion:
    """Every sample is used the same number of times."""

    count: int = 1

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError("fixed epoch count must be >= 0")

    def epochs(self, error_norm: float) -> int:
        return self.count


class RandomEpochCriterion:
    """Seeded random epoch counts with fixed (easy, hard, anomaly) rates.

    Draws 1, 2 or 0 epochs with the given probabilities from a private
    generator, so a run is reproducible from its seed and independent of
    any global random state.
    """

    def __init__(self, probs=(0.5, 0.499, 0.001), seed=0):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (3,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigError("probabilities must be 3 nonnegative values summing to 1")
        self.probs = probs
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def epochs(self, error_norm: float) -> int:
        return int(self._rng.choice([1, 2, 0], p=self.probs))


def epochs_for_sample(error_norm: float, criterion) -> int:
    """Epoch count for a sample with one-step error ``error_norm``."""
    if error_norm < 0 or not math.isfinite(error_norm):
        raise ConfigError("error norm must be finite and >= 0")
    return criterion.epochs(error_norm)


def dme_adapt(adapter, state, model, window, observed, criterion):
    """Adapt on one sample with a criterion-chosen number of inner epochs.

    The error is measured against the prediction of the *pre-update*
    parameters; each of the ``kappa`` inner epochs then re-predicts from the
    current parameters and applies a full adapter step. Returns
    ``(new_state, kappa, error_norm)``; with ``kappa = 0`` the input state
    is returned untouched.
    """
    predicted = model.predict_one_step(state.params, window)
    innovation = Innovation.from_pair(observed, predicted)
    kappa = epochs_for_sample(innovation.error_norm, criterion)
    for _ in range(kappa):
        state = adapter.adapt(state, model, window, observed)
    return state, kappa, innovation.error_norm


def calibrate_thresholds(validation_errors, q1=0.5, q2=0.999, *, no_anomaly=False):
    """Nearest-rank quantile thresholds from validation one-step errors.

    ``xi1`` and ``xi2`` are the ``ceil(q * N)``-th order statistics of the
    sorted errors, so they are always observed values and ``q1 <= q2``
    implies ``xi1 <= xi2``. With ``no_anomaly=True`` the upper threshold is
    set to infinity and no sample is ever skipped, the appropriate choice
    for noise-free streams.
    """
    errors = np.sort(np.asarray(list(validation_errors), dtype=np.float64))
    if errors.size == 0:
        raise ConfigError("cannot calibrate thresholds from an empty error list")
    if np.any(errors < 0) or not np.all(np.isfinite(errors)):
        raise ConfigError("validation errors must be finite and >= 0")
    if not (0 <= q1 <= q2 <= 1):
        raise ConfigError("quantile levels must satisfy 0 <= q1 <= q2 <= 1")
    xi1 = _nearest_rank(errors, q1)
    xi2 = math.inf if no_anomaly else _nearest_rank(errors, q2)
    return DmeThresholds(xi1=xi1, xi2=xi2)


def _nearest_rank(sorted_errors, q):
    rank = max(1, math.ceil(q * sorted_errors.size))
    return float(sorted_errors[rank - 1])


def make_criterion(cfg: dict):
    """Criterion factory for the ``dme`` config section.

    ``{"kind": "none"}`` and ``{"kind": "fixed", "k": 1}`` both mean plain
    single-epoch adaptation; "proposed" selects the error-threshold banding
    (thresholds must already be resolved into ``xi1``/``xi2``); "random"
    draws from seeded probabilities.
    """
    kind = cfg.get("kind", "none")
    if kind == "none":
        return FixedEpochCriterion(1)
    if kind == "fixed":
        return FixedEpochCriterion(cfg.get("k", 2))
    if kind == "random":
        return RandomEpochCriterion(cfg.get("p", (0.5, 0.499, 0.001)), cfg.get("seed", 0))
    if kind == "proposed":
        if "xi1" not in cfg or "xi2" not in cfg:
            raise ConfigError("proposed criterion needs calibrated xi1/xi2 thresholds")
        return ErrorBandCriterion(DmeThresholds(cfg["xi1"], cfg["xi2"]))
    raise ConfigError(f"unknown dme kind {kind!r}")
