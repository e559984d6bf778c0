# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Allocation policies side by side
#
# Eight jobs of eight workers share one switch with 5 MB of aggregator
# memory. Workload size is scaled down (``SCALE``) so that a run takes
# seconds; link speed, latency, window and memory stay at full size.
# Set ``INASIM_DEMO_SEEDS`` (e.g. ``1..5``) to widen the sweep.

# +
import os

import numpy as np

from inasim.experiment import config_from_dict, parse_seeds, run_matrix

SCALE = float(os.environ.get("INASIM_DEMO_SCALE", "0.05"))
SEEDS = parse_seeds(os.environ.get("INASIM_DEMO_SEEDS", "1"))
POLICIES = ["esa", "atp", "switchml", "always", "coinflip:0.5"]

cfg = config_from_dict(dict(preset="dnnA", jobs=8, workers_per_job=8, iterations=2, warmup=1,
                            workload_scale=SCALE))
reports, table = run_matrix(cfg, POLICIES, SEEDS)
# -

# Mean JCT per policy and its ratio to ESA's (above 1 means slower than ESA):

# +
for row in table:
    print(f"{row['policy']:14s} {row['mean_jct_ns'] / 1e3:9.1f} us  x{row['speedup_of_esa']}")
# -

# Where the time goes: PS fallbacks, preemptions and reminders per run.

# +
print(f"{'policy':14s} {'util':>6s} {'fallbacks':>10s} {'preempt':>8s} {'reminders':>10s}")
for r in reports:
    print(f"{r.policy:14s} {r.utilization:6.3f} {r.ps_fallbacks:10d} {r.preemptions:8d} "
          f"{r.reminders:10d}")
# -

# Per-job spread of JCT under each policy:

# +
for r in reports:
    v = np.array(list(r.job_jct_ns.values())) / 1e3
    print(f"{r.policy:14s} min {v.min():8.1f} us  median {np.median(v):8.1f} us  "
          f"max {v.max():8.1f} us")
