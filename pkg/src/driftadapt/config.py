"""Experiment configuration: defaults, deep-merge, validation, digest.

A single JSON document drives every command. Unknown keys are rejected so
typos fail fast, and validation runs before any output file is touched.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .adapters import ADAPTER_KINDS, make_adapter
from .errors import ConfigError

DME_KINDS = ("none", "fixed", "random", "proposed")

_DEFAULTS = {
    "dataset": {
        "kind": "drift-linear",
        "trials": 10,
        "length": 300,
        "noise_std": 0.02,
        "outlier_rate": 0.004,
        "outlier_scale": 0.5,
        "drive_jitter": 0.4,
        "seed": 7,
        "path": None,
    },
    "model": {
        "kind": "recurrent",
        "window": 8,
        "horizon": 4,
        "hidden": 8,
        "classes": 3,
        "seed": 1,
        "d_out": None,
        "adapt_blocks": None,
    },
    "train": {
        "epochs": 10,
        "batch": 128,
        "lr": 0.01,
        "seed": 2,
        "classifier_weight": 1.0,
    },
    "adapter": {
        "kind": "mekf",
    },
    "dme": {
        "kind": "proposed",
        "q1": 0.5,
        "q2": 0.999,
        "no_anomaly": False,
        "k": 2,
        "p": [0.5, 0.499, 0.001],
        "seed": 99,
    },
    "run": {
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "split": [0.8, 0.1, 0.1],
        "carry_state": False,
        "calibrate_adapted": True,
        "trial": 0,
    },
    "bench": {
        "adapters": ["none", "sgd", "adam", "amsgrad", "mekf", "mekf_ema"],
        "dme": ["none", "proposed"],
    },
    "output": {
        "dir": "out",
    },
}


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


def merge_config(user: dict) -> dict:
    """Overlay a (possibly partial) user document onto the defaults."""
    cfg = default_config()
    for section, content in (user or {}).items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in content.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: dict) -> dict:
    """Check every range constraint up front; returns the config unchanged."""
    ds = cfg["dataset"]
    _require(ds["kind"] in ("drift-linear", "csv"), f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] == "drift-linear":
        _require(int(ds["trials"]) >= 3, "dataset.trials must be >= 3 to split")
        _require(int(ds["length"]) >= 12, "dataset.length must be >= 12")
        _require(float(ds["noise_std"]) >= 0, "dataset.noise_std must be >= 0")
        _require(0 <= float(ds["outlier_rate"]) < 1, "dataset.outlier_rate must be in [0, 1)")
        _require(float(ds["outlier_scale"]) >= 0, "dataset.outlier_scale must be >= 0")
        _require(0 <= float(ds["drive_jitter"]) <= 1, "dataset.drive_jitter must be in [0, 1]")
    else:
        _require(bool(ds.get("path")), "dataset.path is required for csv datasets")

    mc = cfg["model"]
    _require(mc["kind"] in ("linear", "mlp", "recurrent"),
             f"unknown model kind {mc['kind']!r}")
    _require(int(mc["window"]) >= 1 and int(mc["horizon"]) >= 1,
             "model.window and model.horizon must be >= 1")
    if ds["kind"] == "drift-linear":
        _require(int(ds["length"]) > int(mc["window"]) + int(mc["horizon"]),
                 "dataset.length must exceed window + horizon")
    if mc["kind"] == "recurrent":
        _require(1 <= int(mc["hidden"]) <= 16, "recurrent hidden size must be in [1, 16]")
    _require(mc["d_out"] is None or int(mc["d_out"]) >= 1, "model.d_out must be >= 1")
    if mc["adapt_blocks"] is not None:
        _require(isinstance(mc["adapt_blocks"], (list, tuple)) and mc["adapt_blocks"],
                 "model.adapt_blocks must be a nonempty list of block prefixes")

    tr = cfg["train"]
    _require(int(tr["epochs"]) >= 1, "train.epochs must be >= 1")
    _require(int(tr["batch"]) >= 1, "train.batch must be >= 1")
    _require(float(tr["lr"]) > 0, "train.lr must be > 0")
    _require(float(tr["classifier_weight"]) >= 0, "train.classifier_weight must be >= 0")

    make_adapter(cfg["adapter"])  # raises ConfigError on bad kind or ranges

    dme = cfg["dme"]
    _require(dme["kind"] in DME_KINDS, f"unknown dme kind {dme['kind']!r}")
    _require(0 <= float(dme["q1"]) <= float(dme["q2"]) <= 1,
             "dme quantiles must satisfy 0 <= q1 <= q2 <= 1")
    _require(int(dme["k"]) >= 0, "dme.k must be >= 0")
    p = np.asarray(dme["p"], dtype=float)
    _require(p.shape == (3,) and np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12,
             "dme.p must be 3 nonnegative probabilities summing to 1")

    run = cfg["run"]
    _require(isinstance(run["seeds"], (list, tuple)) and len(run["seeds"]) >= 1,
             "run.seeds must be a nonempty list")
    _require(all(int(s) >= 0 for s in run["seeds"]), "run.seeds must be nonnegative")
    ratios = run["split"]
    _require(len(ratios) == 3 and all(r >= 0 for r in ratios)
             and abs(sum(ratios) - 1.0) <= 1e-9,
             "run.split must be 3 nonnegative ratios summing to 1")
    _require(int(run["trial"]) >= 0, "run.trial must be >= 0")

    bench = cfg["bench"]
    _require(bench["adapters"], "bench.adapters must be nonempty")
    for spec in bench["adapters"]:
        make_adapter(spec)
        kind = spec if isinstance(spec, str) else spec.get("kind")
        _require(kind in ADAPTER_KINDS, f"unknown bench adapter {kind!r}")
    _require(bench["dme"], "bench.dme must be nonempty")
    for kind in bench["dme"]:
        _require(kind in DME_KINDS, f"unknown bench dme kind {kind!r}")

    _require(bool(cfg["output"]["dir"]), "output.dir must be set")
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
