"""Online adaptation loop, offline training, metrics, and benchmark matrix.

The streaming loop follows adapt-then-predict ordering: when sample t
arrives, the ground truth observation is first used to update the
parameters (via the previous window and the prediction the pre-update
parameters would make for it), and only then is the multi-step prediction
for the new window produced, so every logged prediction reflects the
parameters that already saw time t. The first sample of each trial has no
previous prediction, so adaptation is skipped there.

Metric fidelity note: the trajectory error is reported exactly as defined
for the benchmark protocol, ``mean_t ||Y_t - Yhat_t||_2 / m``. That formula
takes an unsquared norm; the conventionally squared variant is reported
alongside under the explicit name ``mse_squared``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import (AdapterState, FrozenAdapter, GradHyper, adam_step,
                       make_adapter)
from .config import config_digest, validate_config
from .data import Sample, drift_linear_config, gen_drifting_series, read_csv, split, windowize
from .errors import ConfigError, NumericsError, TrainingError, UnsupportedModelError
from .models import make_model
from .multiepoch import calibrate_thresholds, dme_adapt, make_criterion
from .params import AdaptableMask


@dataclass
class StepRecord:
    trial: str
    t: int
    target: np.ndarray                       # ground-truth future window (m, d_out)
    prediction: np.ndarray                   # multi-step prediction after adapting
    observed: Optional[np.ndarray]           # measurement that arrived at t
    one_step_pred: Optional[np.ndarray]      # pre-update prediction of that measurement
    error_norm: float                        # ||observed - one_step_pred||, NaN at trial starts
    kappa: int                               # inner epochs spent on this sample
    intent_label: Optional[int] = None
    intent_probs: Optional[np.ndarray] = None
    adapt_seconds: float = 0.0


@dataclass
class PredictionLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def error_norms(self, drop_nan=False) -> np.ndarray:
        values = np.array([r.error_norm for r in self.records])
        return values[~np.isnan(values)] if drop_nan else values

    def kappas(self) -> np.ndarray:
        return np.array([r.kappa for r in self.records])

    def trials(self) -> list[str]:
        seen = dict.fromkeys(r.trial for r in self.records)
        return list(seen)

    def to_csv(self, path):
        """Write ``t,j,kappa,y_0..,yhat_0..`` rows; t resets at trial boundaries."""
        if not self.records:
            raise ConfigError("empty log")
        d_out = self.records[0].target.shape[1]
        with open(path, "w") as fh:
            names = [f"y_{i}" for i in range(d_out)] + [f"yhat_{i}" for i in range(d_out)]
            fh.write(",".join(["t", "j", "kappa"] + names) + "\n")
            for r in self.records:
                obs = r.observed if r.observed is not None else np.full(d_out, np.nan)
                pred = r.one_step_pred if r.one_step_pred is not None else np.full(d_out, np.nan)
                cells = [str(r.t), f"{r.error_norm:.17g}", str(r.kappa)]
                cells += [f"{v:.17g}" for v in obs] + [f"{v:.17g}" for v in pred]
                fh.write(",".join(cells) + "\n")


def run_online_adaptation(model, params0, stream: Sequence[Sample], adapter,
                          criterion=None, *, mask: Optional[AdaptableMask] = None,
                          carry_state=False) -> PredictionLog:
    """Stream samples through adapt-then-predict; returns the step log.

    ``criterion=None`` runs plain single-epoch adaptation; otherwise each
    sample's epoch count comes from the criterion. Adapter state is freshly
    initialized at every trial boundary unless ``carry_state`` is set.
    """
    log = PredictionLog()
    state: Optional[AdapterState] = None
    prev: Optional[Sample] = None
    for sample in stream:
        new_trial = prev is None or sample.trial != prev.trial
        if state is None or (new_trial and not carry_state):
            state = adapter.init_state(model, params0, mask)
        if new_trial:
            prev = None
        if prev is None:
            observed = one_step_pred = None
            error_norm, kappa, seconds = float("nan"), 0, 0.0
        else:
            observed = sample.observed(model.d_out)
            one_step_pred = model.predict_one_step(state.params, prev.x)
            started = time.perf_counter()
            try:
                if criterion is None:
                    state = adapter.adapt(state, model, prev.x, observed)
                    kappa = 1
                    error_norm = float(np.linalg.norm(observed - one_step_pred))
                else:
                    state, kappa, error_norm = dme_adapt(
                        adapter, state, model, prev.x, observed, criterion)
            except NumericsError as exc:
                failure = NumericsError(
                    f"adaptation failed at trial {sample.trial!r} step {sample.t}: {exc}",
                    lam=exc.lam, sigma_r=exc.sigma_r, condition=exc.condition)
                failure.state = state
                raise failure from exc
            seconds = time.perf_counter() - started
        horizon = sample.y.shape[0]
        prediction = model.rollout(state.params, sample.x, horizon)
        probs = None
        if model.has_classifier and sample.intent is not None:
            probs = model.classify_intent(state.params, sample.x)
        log.append(StepRecord(
            trial=sample.trial, t=sample.t, target=sample.y, prediction=prediction,
            observed=observed, one_step_pred=one_step_pred, error_norm=error_norm,
            kappa=kappa, intent_label=sample.intent, intent_probs=probs,
            adapt_seconds=seconds))
        prev = sample
    return log


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(log: PredictionLog) -> float:
    """Mean over steps of ``||Y_t - Yhat_t||_2 / m`` (unsquared norm)."""
    if not log.records:
        raise ConfigError("empty log")
    values = [np.linalg.norm(r.target - r.prediction) / r.target.shape[0]
              for r in log.records]
    return float(np.mean(values))


def mse_squared(log: PredictionLog) -> float:
    """Conventional variant: mean over steps of ``||Y_t - Yhat_t||_2^2 / m``."""
    if not log.records:
        raise ConfigError("empty log")
    values = [float(np.sum((r.target - r.prediction) ** 2)) / r.target.shape[0]
              for r in log.records]
    return float(np.mean(values))


def accuracy(log: PredictionLog) -> float:
    """Fraction of labelled steps whose argmax intent matches the label."""
    scored = [(r.intent_label, r.intent_probs) for r in log.records
              if r.intent_label is not None and r.intent_probs is not None]
    if not scored:
        raise UnsupportedModelError("log carries no intent predictions")
    hits = sum(1 for label, probs in scored if int(np.argmax(probs)) == label)
    return hits / len(scored)


def _per_trial_metrics(log: PredictionLog):
    by_trial: dict[str, list[StepRecord]] = {}
    for r in log.records:
        by_trial.setdefault(r.trial, []).append(r)
    trial_mse, trial_acc = [], []
    for records in by_trial.values():
        sub = PredictionLog(records)
        trial_mse.append(mse(sub))
        try:
            trial_acc.append(accuracy(sub))
        except UnsupportedModelError:
            pass
    return trial_mse, (trial_acc if len(trial_acc) == len(by_trial) else None)


# ---------------------------------------------------------------------------
# Offline training
# ---------------------------------------------------------------------------

def offline_train(model, samples: Sequence[Sample], *, epochs=12, batch=128,
                  lr=0.01, seed=0, classifier_weight=1.0):
    """Minimize the mean multi-step rollout loss with Adam.

    Adds cross-entropy on the intent head when the model has a classifier
    and every sample is labelled. Returns ``(params, per_epoch_loss)``;
    deterministic given the seed.
    """
    if not samples:
        raise ConfigError("training set is empty")
    windows = np.stack([s.x for s in samples])
    targets = np.stack([s.y for s in samples])
    labels = None
    if model.has_classifier and all(s.intent is not None for s in samples):
        labels = np.array([s.intent for s in samples], dtype=np.intp)
    params = model.init_params()
    mask = AdaptableMask.all_of(params)
    state = AdapterState(params=params, mask=mask,
                         m1=np.zeros(params.size), m2=np.zeros(params.size))
    hyper = GradHyper(lr=lr).validate()
    rng = np.random.default_rng(seed)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        total, seen = 0.0, 0
        for start in range(0, len(samples), batch):
            idx = order[start:start + batch]
            loss, grad = model.rollout_loss_grad(state.params, windows[idx], targets[idx])
            if labels is not None:
                c_loss, c_grad = model.classifier_loss_grad(state.params, windows[idx],
                                                            labels[idx])
                loss += classifier_weight * c_loss
                grad = grad + classifier_weight * c_grad
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss!r} during offline training")
            state = adam_step(state, grad, hyper)
            total += loss * len(idx)
            seen += len(idx)
        trace.append(total / seen)
    return state.params, trace


def collect_validation_errors(model, params, stream, adapter, *,
                              mask=None, adapted=True) -> np.ndarray:
    """One-step errors over a validation stream, used to calibrate thresholds.

    ``adapted=True`` runs a single-epoch adaptation pass (the same adapter
    that will be benchmarked); ``adapted=False`` scores a frozen model.
    """
    runner = adapter if adapted else FrozenAdapter()
    log = run_online_adaptation(model, params, stream, runner, None, mask=mask)
    return log.error_norms(drop_nan=True)


# ---------------------------------------------------------------------------
# Benchmark matrix
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    adapter: str
    criterion: str
    label: str
    config_digest: str
    mse: float = float("nan")
    mse_std: float = float("nan")
    mse_squared: float = float("nan")
    accuracy: Optional[float] = None
    accuracy_std: Optional[float] = None
    per_seed_mse: list = field(default_factory=list)
    per_seed_accuracy: Optional[list] = None
    mean_adapt_seconds: float = 0.0
    max_adapt_seconds: float = 0.0
    error: Optional[str] = None

    def to_dict(self, include_timing=False) -> dict:
        doc = {
            "adapter": self.adapter,
            "criterion": self.criterion,
            "label": self.label,
            "config_digest": self.config_digest,
            "mse": self.mse,
            "mse_std": self.mse_std,
            "mse_squared": self.mse_squared,
            "accuracy": self.accuracy,
            "accuracy_std": self.accuracy_std,
            "per_seed_mse": self.per_seed_mse,
            "per_seed_accuracy": self.per_seed_accuracy,
            "error": self.error,
        }
        if include_timing:
            doc["mean_adapt_seconds"] = self.mean_adapt_seconds
            doc["max_adapt_seconds"] = self.max_adapt_seconds
        return doc


def _dataset_for_seed(cfg, run_seed):
    ds = cfg["dataset"]
    if ds["kind"] == "drift-linear":
        trajectories = gen_drifting_series(drift_linear_config(
            trials=ds["trials"], length=ds["length"], noise_std=ds["noise_std"],
            seed=ds["seed"] + run_seed, outlier_rate=ds["outlier_rate"],
            outlier_scale=ds["outlier_scale"], drive_jitter=ds["drive_jitter"]))
    elif ds["kind"] == "csv":
        trajectories = read_csv(ds["path"])
    else:
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    return trajectories


def prepare_run(cfg, run_seed):
    """Generate, split, window, and train once for one run seed."""
    trajectories = _dataset_for_seed(cfg, run_seed)
    d = trajectories[0].dim
    model_cfg = dict(cfg["model"])
    d_out = model_cfg.get("d_out") or d
    train_trials, val_trials, test_trials = split(
        trajectories, cfg["run"]["split"], seed=cfg["dataset"]["seed"] + run_seed)
    n, horizon = model_cfg["window"], model_cfg["horizon"]
    streams = {}
    for name, trials in (("train", train_trials), ("val", val_trials), ("test", test_trials)):
        streams[name] = [s for traj in trials for s in windowize(traj, n, horizon, d_out)]
    model = make_model({
        "kind": model_cfg["kind"], "window": n, "d_in": d, "d_out": d_out,
        "hidden": model_cfg.get("hidden", 8), "classes": model_cfg.get("classes", 3),
        "seed": model_cfg.get("seed", 0) + run_seed,
    })
    t = cfg["train"]
    params, trace = offline_train(
        model, streams["train"], epochs=t["epochs"], batch=t["batch"], lr=t["lr"],
        seed=t["seed"] + run_seed, classifier_weight=t["classifier_weight"])
    if model_cfg.get("adapt_blocks"):
        mask = AdaptableMask.for_blocks(params, model_cfg["adapt_blocks"])
    else:
        mask = model.default_mask(params)
    return {"model": model, "params": params, "mask": mask,
            "streams": streams, "loss_trace": trace}


def _resolve_criterion(cfg, prep, adapter, dme_kind, run_seed, threshold_cache):
    if dme_kind == "none":
        return None, "none"
    dme_cfg = dict(cfg["dme"])
    dme_cfg["kind"] = dme_kind
    if dme_kind == "random":
        dme_cfg["seed"] = dme_cfg.get("seed", 0) + run_seed
    if dme_kind == "proposed":
        if not prep["streams"]["val"]:
            raise ConfigError(
                "threshold calibration needs a nonempty validation split; "
                "increase dataset.trials or rebalance run.split")
        key = id(adapter.__class__), getattr(adapter, "hyper", None)
        if key not in threshold_cache:
            errors = collect_validation_errors(
                prep["model"], prep["params"], prep["streams"]["val"], adapter,
                mask=prep["mask"], adapted=cfg["run"]["calibrate_adapted"])
            threshold_cache[key] = calibrate_thresholds(
                errors, dme_cfg["q1"], dme_cfg["q2"],
                no_anomaly=dme_cfg.get("no_anomaly", False))
        thresholds = threshold_cache[key]
        dme_cfg["xi1"], dme_cfg["xi2"] = thresholds.xi1, thresholds.xi2
    return make_criterion(dme_cfg), dme_kind


def enumerate_cells(cfg, only=None):
    """Expand the bench section into (adapter_spec, dme_kind, label) cells.

    ``only`` filters by label, e.g. ``"mekf_ema+dme"`` or ``"adam"``; the
    generic suffix ``+dme`` matches any non-plain criterion cell.
    """
    cells = []
    for adapter_spec in cfg["bench"]["adapters"]:
        spec = {"kind": adapter_spec} if isinstance(adapter_spec, str) else dict(adapter_spec)
        name = spec.get("label", spec["kind"])
        for dme_kind in cfg["bench"]["dme"]:
            label = name if dme_kind == "none" else f"{name}+{dme_kind}"
            cells.append((spec, dme_kind, label))
    if only:
        wanted = only.split(",")

        def _matches(cell):
            spec, dme_kind, label = cell
            name = spec.get("label", spec["kind"])
            for item in wanted:
                generic = name + "+dme"
                if label == item or (item == generic and dme_kind != "none") \
                        or (item == name and dme_kind == "none"):
                    return True
            return False

        cells = [c for c in cells if _matches(c)]
        if not cells:
            raise ConfigError(f"--only {only!r} matches no bench cell")
    return cells


def run_seed_cells(cfg, run_seed, cells):
    """All cells for one seed, sharing the generated data and trained model."""
    prep = prepare_run(cfg, run_seed)
    threshold_cache = {}
    out = {}
    for spec, dme_kind, label in cells:
        try:
            adapter = make_adapter(spec)
            criterion, _ = _resolve_criterion(cfg, prep, adapter, dme_kind,
                                              run_seed, threshold_cache)
            log = run_online_adaptation(
                prep["model"], prep["params"], prep["streams"]["test"], adapter,
                criterion, mask=prep["mask"], carry_state=cfg["run"]["carry_state"])
            trial_mse, trial_acc = _per_trial_metrics(log)
            seconds = [r.adapt_seconds for r in log.records if not np.isnan(r.error_norm)]
            out[label] = {
                "mse": mse(log), "mse_squared": mse_squared(log),
                "trial_mse": trial_mse, "trial_accuracy": trial_acc,
                "accuracy": accuracy(log) if trial_acc is not None else None,
                "mean_seconds": float(np.mean(seconds)) if seconds else 0.0,
                "max_seconds": float(np.max(seconds)) if seconds else 0.0,
            }
        except (NumericsError, TrainingError, UnsupportedModelError) as exc:
            out[label] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def run_matrix(cfg, *, jobs=1, only=None) -> list[RunResult]:
    """Run every bench cell across every seed; aggregates per cell.

    Cells share per-seed data and pretrained weights, so comparisons are
    paired. With ``jobs > 1`` seeds run in parallel processes; results are
    aggregated in a fixed order either way.
    """
    cfg = validate_config(cfg)
    cells = enumerate_cells(cfg, only)
    seeds = list(cfg["run"]["seeds"])
    digest = config_digest(cfg)
    if jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            payloads = dict(zip(seeds, pool.map(
                run_seed_cells, [cfg] * len(seeds), seeds, [cells] * len(seeds))))
    else:
        payloads = {seed: run_seed_cells(cfg, seed, cells) for seed in seeds}

    results = []
    for spec, dme_kind, label in cells:
        per_seed = [payloads[seed][label] for seed in seeds]
        errors = [p["error"] for p in per_seed if "error" in p]
        result = RunResult(adapter=spec.get("label", spec["kind"]), criterion=dme_kind,
                           label=label, config_digest=digest)
        if errors:
            result.error = errors[0]
            results.append(result)
            continue
        trial_mse = [v for p in per_seed for v in p["trial_mse"]]
        result.mse = float(np.mean([p["mse"] for p in per_seed]))
        result.mse_std = float(np.std(trial_mse))
        result.mse_squared = float(np.mean([p["mse_squared"] for p in per_seed]))
        result.per_seed_mse = [float(p["mse"]) for p in per_seed]
        if all(p["accuracy"] is not None for p in per_seed):
            trial_acc = [v for p in per_seed for v in p["trial_accuracy"]]
            result.accuracy = float(np.mean([p["accuracy"] for p in per_seed]))
            result.accuracy_std = float(np.std(trial_acc))
            result.per_seed_accuracy = [float(p["accuracy"]) for p in per_seed]
        result.mean_adapt_seconds = float(np.mean([p["mean_seconds"] for p in per_seed]))
        result.max_adapt_seconds = float(np.max([p["max_seconds"] for p in per_seed]))
        results.append(result)
    return results


def format_table(results: Sequence[RunResult]) -> str:
    """Plain-text comparison table, one row per bench cell."""
    headers = ["cell", "mse", "mse_std", "mse_squared", "accuracy", "acc_std"]
    rows = []
    for r in results:
        if r.error:
            rows.append([r.label, "error: " + r.error, "", "", "", ""])
            continue
        rows.append([
            r.label, f"{r.mse:.6f}", f"{r.mse_std:.6f}", f"{r.mse_squared:.6f}",
            "-" if r.accuracy is None else f"{r.accuracy:.4f}",
            "-" if r.accuracy_std is None else f"{r.accuracy_std:.4f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"
