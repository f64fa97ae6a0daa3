#!/usr/bin/env python3
"""The benchmark matrix: adapters x epoch criteria over seeded runs.

This is the library-level equivalent of `driftadapt bench`: every cell
shares the per-seed generated data and offline-trained weights, so the
comparison is paired. A reduced matrix keeps this demo short; the stock
configuration is the package default (10 seeds, 12 cells).
"""

from driftadapt import default_config, run_matrix
from driftadapt.harness import format_table

cfg = default_config()
cfg["dataset"]["trials"] = 10
cfg["run"]["seeds"] = [0, 1, 2]
cfg["bench"]["adapters"] = ["none", "sgd", "mekf", "mekf_ema"]
cfg["bench"]["dme"] = ["none", "proposed"]

print("running 8 cells x 3 seeds (about a minute) ...")
results = run_matrix(cfg)
print()
print(format_table(results))

frozen = next(r for r in results if r.label == "none")
best = min((r for r in results if r.error is None), key=lambda r: r.mse)
print(f"best cell: {best.label} at {best.mse:.4f} vs frozen {frozen.mse:.4f} "
      f"({best.mse / frozen.mse:.1%} of the frozen error)")
print(f"mean adaptation cost: {best.mean_adapt_seconds * 1e3:.2f} ms/sample")
