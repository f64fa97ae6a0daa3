"""Synthetic drifting time series, windowing, splits, and CSV round-trips.

Trajectories are generated from piecewise linear recurrences
``x_{t+1} = A_r x_t + c_r + noise`` where the active regime ``r`` follows
either a fixed switch schedule or a Markov switching process. Each regime
carries an intent class, which doubles as the per-step label, and the
generator records the active regime per step so tests can introspect
exactly where the dynamics changed.

The stock benchmark ("drift-linear") models displacement/velocity motion
with three intent regimes (constant, accelerating, decelerating) whose
dynamics coefficients shift at mid-trial: models trained offline see an
averaged system and online adaptation has to track the active one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError


@dataclass(frozen=True)
class Regime:
    """One linear recurrence ``x' = coeff x + offset`` with an intent class."""

    coeff: np.ndarray
    offset: np.ndarray
    intent: int = 0

    def __post_init__(self):
        coeff = np.atleast_2d(np.asarray(self.coeff, dtype=np.float64))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=np.float64))
        if coeff.shape[0] != coeff.shape[1] or coeff.shape[0] != offset.size:
            raise ConfigError("regime coeff must be square and match offset length")
        object.__setattr__(self, "coeff", coeff)
        object.__setattr__(self, "offset", offset)


@dataclass(frozen=True)
class DriftConfig:
    regimes: tuple[Regime, ...]
    length: int
    trials: int
    noise_std: float = 0.0
    seed: int = 0
    switch_times: tuple[int, ...] = ()
    regime_order: Optional[tuple[int, ...]] = None
    switch_rate: Optional[float] = None
    x0_mean: Optional[np.ndarray] = None
    x0_std: float = 1.0
    outlier_rate: float = 0.0
    outlier_scale: float = 0.0
    drive_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "switch_times", tuple(self.switch_times))
        if self.regime_order is not None:
            object.__setattr__(self, "regime_order", tuple(self.regime_order))
        if not self.regimes:
            raise ConfigError("at least one regime is required")
        if self.length < 2 or self.trials < 1:
            raise ConfigError("length must be >= 2 and trials >= 1")
        if self.noise_std < 0 or self.x0_std < 0 or self.outlier_scale < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0 <= self.outlier_rate < 1:
            raise ConfigError("outlier_rate must be in [0, 1)")
        if not 0 <= self.drive_jitter <= 1:
            raise ConfigError("drive_jitter must be in [0, 1]")
        d = self.regimes[0].offset.size
        if any(r.offset.size != d for r in self.regimes):
            raise ConfigError("all regimes must share one dimension")
        if self.switch_times and self.switch_rate is not None:
            raise ConfigError("choose either switch_times or switch_rate, not both")
        if any(not 0 < t < self.length for t in self.switch_times):
            raise ConfigError("switch times must lie strictly inside the trial")
        if list(self.switch_times) != sorted(set(self.switch_times)):
            raise ConfigError("switch times must be strictly increasing")
        if self.switch_rate is not None and not 0 <= self.switch_rate <= 1:
            raise ConfigError("switch rate must be in [0, 1]")
        segments = len(self.switch_times) + 1
        order = self.regime_order
        if order is not None:
            if self.switch_rate is not None:
                raise ConfigError("regime_order only applies with switch_times")
            if len(order) != segments:
                raise ConfigError(f"regime_order must list {segments} segments")
            if any(not 0 <= r < len(self.regimes) for r in order):
                raise ConfigError("regime_order entries out of range")

    @property
    def dim(self) -> int:
        return self.regimes[0].offset.size


@dataclass(frozen=True)
class Trajectory:
    trial: str
    steps: np.ndarray
    intent_labels: Optional[np.ndarray] = None
    regime_trace: Optional[np.ndarray] = None

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.float64)
        if steps.ndim != 2:
            raise ConfigError("trajectory steps must be a (T, d) array")
        object.__setattr__(self, "steps", steps)
        for name in ("intent_labels", "regime_trace"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.intp)
                if arr.shape != (steps.shape[0],):
                    raise ConfigError(f"{name} must align 1:1 with steps")
                object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.steps.shape[0]

    @property
    def dim(self) -> int:
        return self.steps.shape[1]


@dataclass(frozen=True)
class Sample:
    """One training/streaming pair: input window, future window, label."""

    x: np.ndarray          # (n, d) most recent first
    y: np.ndarray          # (m, d_out)
    intent: Optional[int]
    t: int                 # anchor index into the source trajectory
    trial: str

    def observed(self, d_out: int) -> np.ndarray:
        """The measurement that arrives at this sample's anchor time."""
        return self.x[0, :d_out]


def _segment_regimes(config: DriftConfig) -> list[int]:
    segments = len(config.switch_times) + 1
    if config.regime_order is not None:
        return list(config.regime_order)
    return [i % len(config.regimes) for i in range(segments)]


def gen_drifting_series(config: DriftConfig) -> list[Trajectory]:
    """Generate ``config.trials`` trajectories, deterministic in the seed."""
    d = config.dim
    children = np.random.SeedSequence(config.seed).spawn(config.trials)
    trajectories = []
    for trial_idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        steps = np.empty((config.length, d))
        trace = np.empty(config.length, dtype=np.intp)
        x0_mean = np.zeros(d) if config.x0_mean is None else np.asarray(config.x0_mean, float)
        x = x0_mean + config.x0_std * rng.standard_normal(d)
        # Per-trial system identity: each trial scales its regime drives, so
        # test trials carry dynamics the offline model has never seen.
        offsets = [r.offset for r in config.regimes]
        if config.drive_jitter:
            factors = 1.0 + config.drive_jitter * rng.uniform(-1.0, 1.0, len(offsets))
            offsets = [off * f for off, f in zip(offsets, factors)]
        if config.switch_rate is None:
            order = _segment_regimes(config)
            boundaries = list(config.switch_times) + [config.length]
            segment = 0
            regime_idx = order[0]
        else:
            regime_idx = 0
        for t in range(config.length):
            if config.switch_rate is None:
                if t >= boundaries[segment]:
                    segment += 1
                    regime_idx = order[segment]
            elif t > 0 and len(config.regimes) > 1 and rng.random() < config.switch_rate:
                others = [i for i in range(len(config.regimes)) if i != regime_idx]
                regime_idx = int(rng.choice(others))
            steps[t] = x
            if config.outlier_rate and rng.random() < config.outlier_rate:
                # Sensor glitch: corrupts the recorded measurement only, the
                # latent state keeps evolving from the clean value.
                steps[t] = x + config.outlier_scale * rng.standard_normal(d)
            trace[t] = regime_idx
            regime = config.regimes[regime_idx]
            x = regime.coeff @ x + offsets[regime_idx]
            if config.noise_std:
                x = x + config.noise_std * rng.standard_normal(d)
        labels = np.array([config.regimes[r].intent for r in trace], dtype=np.intp)
        trajectories.append(Trajectory(trial=f"trial{trial_idx:03d}", steps=steps,
                                       intent_labels=labels, regime_trace=trace))
    return trajectories


def drift_linear_config(trials=10, length=300, noise_std=0.02, seed=7,
                        outlier_rate=0.004, outlier_scale=0.5,
                        drive_jitter=0.4) -> DriftConfig:
    """The stock displacement/velocity benchmark with a mid-trial dynamics shift.

    State is (displacement, velocity). Three intent regimes (constant,
    accelerating, decelerating) cycle every sixth of the trial; at the
    midpoint the velocity dynamics switch from a slow, lightly driven
    system to a fast, strongly driven one, which is the drift event online
    adaptation must absorb. A small rate of sensor-glitch outliers gives
    anomaly handling something real to do.
    """
    def _regime(damping, drive, intent):
        return Regime(coeff=np.array([[0.0, 0.1], [0.0, damping]]),
                      offset=np.array([0.0, drive]), intent=intent)

    regimes = (
        _regime(0.98, 0.02, 0),    # pre-shift: cruise toward v = 1
        _regime(0.98, 0.08, 1),    # pre-shift: accelerate toward v = 4
        _regime(0.98, -0.04, 2),   # pre-shift: decelerate toward v = -2
        _regime(0.85, 0.15, 0),    # post-shift dynamics family
        _regime(0.85, 0.60, 1),
        _regime(0.85, -0.30, 2),
    )
    if length < 12:
        raise ConfigError("drift-linear trials need length >= 12")
    seg = length // 6
    switch_times = tuple(seg * k for k in range(1, 6))
    return DriftConfig(regimes=regimes, length=length, trials=trials,
                       noise_std=noise_std, seed=seed,
                       switch_times=switch_times, regime_order=(0, 1, 2, 3, 4, 5),
                       x0_mean=np.array([0.1, 1.0]), x0_std=0.1,
                       outlier_rate=outlier_rate, outlier_scale=outlier_scale,
                       drive_jitter=drive_jitter)


def windowize(traj: Trajectory, n: int, m: int, d_out: Optional[int] = None) -> list[Sample]:
    """Slide an ``(n past, m future)`` window over the trajectory, stride one.

    Anchor ``t`` yields input ``steps[t], steps[t-1], ..., steps[t-n+1]``
    (most recent first) and output ``steps[t+1:t+m+1]`` truncated to the
    first ``d_out`` coordinates. Produces ``len(traj) - n - m + 1`` samples
    when positive, else none.
    """
    if n < 1 or m < 1:
        raise ConfigError("window length and horizon must be >= 1")
    d_out = traj.dim if d_out is None else d_out
    if not 1 <= d_out <= traj.dim:
        raise ConfigError("d_out must be in [1, d]")
    samples = []
    for t in range(n - 1, len(traj) - m):
        x = traj.steps[t - n + 1:t + 1][::-1].copy()
        y = traj.steps[t + 1:t + m + 1, :d_out].copy()
        intent = int(traj.intent_labels[t]) if traj.intent_labels is not None else None
        samples.append(Sample(x=x, y=y, intent=intent, t=t, trial=traj.trial))
    return samples


def split(trajectories: Sequence[Trajectory], ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition whole trials into (train, val, test) by seeded shuffle.

    Counts are floor allocations of the first two ratios with the
    remainder going to the last partition.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be 3 nonnegative values summing to 1")
    n = len(trajectories)
    parts = sum(1 for r in ratios if r > 0)
    if n < parts:
        raise ConfigError(f"cannot split {n} trials into {parts} nonempty partitions")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(ratios[0] * n)
    n_val = math.floor(ratios[1] * n)
    train = [trajectories[i] for i in order[:n_train]]
    val = [trajectories[i] for i in order[n_train:n_train + n_val]]
    test = [trajectories[i] for i in order[n_train + n_val:]]
    return train, val, test


def write_csv(trajectories: Sequence[Trajectory], path):
    """Write trajectories as ``trial,t,x_0..x_{d-1}[,intent]`` rows.

    Values are printed with 17 significant digits so a round-trip
    reproduces float64 exactly. The intent column is present iff every
    trajectory carries labels.
    """
    if not trajectories:
        raise ConfigError("nothing to write")
    d = trajectories[0].dim
    if any(traj.dim != d for traj in trajectories):
        raise ConfigError("all trajectories must share one dimension")
    labelled = [traj.intent_labels is not None for traj in trajectories]
    if any(labelled) and not all(labelled):
        raise ConfigError("either every trajectory has intent labels or none")
    with_intent = all(labelled)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["trial", "t"] + [f"x_{i}" for i in range(d)]
        if with_intent:
            header.append("intent")
        writer.writerow(header)
        for traj in trajectories:
            for t in range(len(traj)):
                row = [traj.trial, t] + [f"{v:.17g}" for v in traj.steps[t]]
                if with_intent:
                    row.append(int(traj.intent_labels[t]))
                writer.writerow(row)


def read_csv(path) -> list[Trajectory]:
    """Read trajectories written by :func:`write_csv`; validates the schema."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if header[:2] != ["trial", "t"]:
            missing = [c for c in ("trial", "t") if c not in header[:2]]
            raise ParseError(f"missing column(s) {missing}", line=1)
        rest = header[2:]
        with_intent = bool(rest) and rest[-1] == "intent"
        x_cols = rest[:-1] if with_intent else rest
        if x_cols != [f"x_{i}" for i in range(len(x_cols))] or not x_cols:
            raise ParseError("missing column(s) ['x_0..x_{d-1}']", line=1)
        d = len(x_cols)
        trajectories = []
        current_trial, rows, labels = None, [], []
        seen = set()

        def _flush():
            if current_trial is not None:
                trajectories.append(Trajectory(
                    trial=current_trial, steps=np.array(rows),
                    intent_labels=np.array(labels, dtype=np.intp) if with_intent else None))

        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line_no)
            trial = row[0]
            if trial != current_trial:
                if trial in seen:
                    raise ParseError(f"trial {trial!r} rows are not contiguous", line=line_no)
                _flush()
                current_trial, rows, labels = trial, [], []
                seen.add(trial)
            try:
                t = int(row[1])
                values = [float(v) for v in row[2:2 + d]]
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
            if t != len(rows):
                raise ParseError(f"expected t={len(rows)} within trial {trial!r}, got {t}",
                                 line=line_no)
            rows.append(values)
            if with_intent:
                try:
                    labels.append(int(row[-1]))
                except ValueError as exc:
                    raise ParseError(str(exc), line=line_no) from None
        _flush()
    if not trajectories:
        raise ParseError("file contains a header but no rows", line=2)
    return trajectories
