"""Command line front end.

Subcommands: ``generate`` (write the synthetic dataset as CSV), ``train``
(offline-train and save the model), ``calibrate`` (dump validation errors
and epoch thresholds), ``adapt`` (run one stream and dump its step log),
``bench`` (run the full comparison matrix), ``report`` (re-render the
table from saved results). Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .adapters import make_adapter
from .config import (canonical_json, default_config, merge_config, validate_config)
from .data import drift_linear_config, gen_drifting_series, write_csv
from .errors import ConfigError, NumericsError, ParseError, TrainingError
from .models import load_model, save_model
from .multiepoch import calibrate_thresholds


def _load_config(path):
    if path is None:
        return validate_config(default_config())
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
    return validate_config(merge_config(user))


def _out_dir(cfg):
    path = Path(cfg["output"]["dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_generate(cfg, args):
    ds = cfg["dataset"]
    if ds["kind"] != "drift-linear":
        raise ConfigError("generate requires a drift-linear dataset section")
    trajectories = gen_drifting_series(drift_linear_config(
        trials=ds["trials"], length=ds["length"], noise_std=ds["noise_std"],
        seed=ds["seed"], outlier_rate=ds["outlier_rate"],
        outlier_scale=ds["outlier_scale"], drive_jitter=ds["drive_jitter"]))
    out = Path(args.out) if args.out else _out_dir(cfg) / "dataset.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(trajectories, out)
    print(f"wrote {sum(len(t) for t in trajectories)} rows "
          f"({len(trajectories)} trials) to {out}")
    return 0


def cmd_train(cfg, args):
    prep = harness.prepare_run(cfg, run_seed=0)
    out = _out_dir(cfg)
    model_path = out / "model.json"
    save_model(prep["model"], prep["params"], model_path)
    with open(out / "training_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(prep["loss_trace"], start=1):
            fh.write(f"{epoch},{loss:.17g}\n")
    print(f"wrote {model_path} (final loss {prep['loss_trace'][-1]:.6g})")
    return 0


def cmd_calibrate(cfg, args):
    out = _out_dir(cfg)
    model_path = out / "model.json"
    if not model_path.exists():
        raise ConfigError(f"{model_path} not found; run `driftadapt train` first")
    model, params = load_model(model_path)
    prep = harness.prepare_run(cfg, run_seed=0)
    if model.to_config() != prep["model"].to_config():
        raise ConfigError("stored model does not match the config's model section")
    adapter = make_adapter(cfg["adapter"])
    errors = harness.collect_validation_errors(
        model, params, prep["streams"]["val"], adapter, mask=prep["mask"],
        adapted=cfg["run"]["calibrate_adapted"])
    dme = cfg["dme"]
    thresholds = calibrate_thresholds(errors, dme["q1"], dme["q2"],
                                      no_anomaly=dme["no_anomaly"])
    with open(out / "validation_errors.csv", "w") as fh:
        fh.write("j\n")
        for value in errors:
            fh.write(f"{value:.17g}\n")
    doc = {"xi1": thresholds.xi1, "xi2": thresholds.xi2,
           "q1": dme["q1"], "q2": dme["q2"], "count": int(errors.size)}
    with open(out / "calibration.json", "w") as fh:
        fh.write(canonical_json(doc))
    print(f"xi1={thresholds.xi1:.6g} xi2={thresholds.xi2:.6g} "
          f"from {errors.size} validation errors")
    return 0


def cmd_adapt(cfg, args):
    prep = harness.prepare_run(cfg, run_seed=0)
    test_stream = prep["streams"]["test"]
    trials = list(dict.fromkeys(s.trial for s in test_stream))
    index = cfg["run"]["trial"]
    if index >= len(trials):
        raise ConfigError(f"run.trial={index} but the test split has {len(trials)} trials")
    wanted = trials[index]
    stream = [s for s in test_stream if s.trial == wanted]
    adapter = make_adapter(cfg["adapter"])
    threshold_cache = {}
    criterion, _ = harness._resolve_criterion(cfg, prep, adapter, cfg["dme"]["kind"],
                                              0, threshold_cache)
    log = harness.run_online_adaptation(
        prep["model"], prep["params"], stream, adapter, criterion,
        mask=prep["mask"], carry_state=cfg["run"]["carry_state"])
    out = _out_dir(cfg) / "prediction_log.csv"
    log.to_csv(out)
    print(f"adapted over trial {wanted!r} ({len(log)} steps), "
          f"mse={harness.mse(log):.6g}; wrote {out}")
    return 0


def cmd_bench(cfg, args):
    results = harness.run_matrix(cfg, jobs=args.jobs, only=args.only)
    out = _out_dir(cfg)
    payload = {"config_digest": results[0].config_digest if results else None,
               "results": [r.to_dict() for r in results]}
    with open(out / "results.json", "w") as fh:
        fh.write(canonical_json(payload))
    timing = {r.label: {"mean_adapt_seconds": r.mean_adapt_seconds,
                        "max_adapt_seconds": r.max_adapt_seconds} for r in results}
    with open(out / "timing.json", "w") as fh:
        fh.write(canonical_json(timing))
    table = harness.format_table(results)
    with open(out / "table.txt", "w") as fh:
        fh.write(table)
    print(table, end="")
    print(f"wrote {out / 'results.json'}")
    return 0


def cmd_report(cfg, args):
    path = Path(args.results) if args.results else _out_dir(cfg) / "results.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `driftadapt bench` first")
    with open(path) as fh:
        payload = json.load(fh)
    results = []
    for doc in payload["results"]:
        results.append(harness.RunResult(
            adapter=doc["adapter"], criterion=doc["criterion"], label=doc["label"],
            config_digest=doc["config_digest"], mse=doc["mse"], mse_std=doc["mse_std"],
            mse_squared=doc["mse_squared"], accuracy=doc["accuracy"],
            accuracy_std=doc["accuracy_std"], per_seed_mse=doc["per_seed_mse"],
            per_seed_accuracy=doc["per_seed_accuracy"], error=doc["error"]))
    print(harness.format_table(results), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="driftadapt",
        description="Online adaptation benchmarks for small time-series predictors.")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the default config JSON and exit")
    sub = parser.add_subparsers(dest="command")
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("calibrate", cmd_calibrate), ("adapt", cmd_adapt),
                     ("bench", cmd_bench), ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to the experiment config JSON")
        p.set_defaults(fn=fn)
        if name == "generate":
            p.add_argument("--out", help="dataset CSV path (default: <output.dir>/dataset.csv)")
        if name == "bench":
            p.add_argument("--only", help="run matching cells only, e.g. mekf_ema+dme")
            p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
        if name == "report":
            p.add_argument("--results", help="results.json path")

    args = parser.parse_args(argv)
    if args.print_defaults:
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        cfg = _load_config(args.config)
        return args.fn(cfg, args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, TrainingError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
