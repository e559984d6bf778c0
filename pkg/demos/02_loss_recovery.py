# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Loss recovery
#
# Each scenario drops exactly one packet and lets the reminder, query and
# retransmit machinery repair it. The table lists where the loss happens
# and the trace events recovery must produce, in order.

# +
from inasim.endhost import LOSS_CASES
from inasim.netsim import PS_PER_US
from inasim.scripted import run_loss_case

for case, (where, steps) in sorted(LOSS_CASES.items()):
    net, hits, frags = run_loss_case(case)
    seen = [r for r in net.trace.rows if r[2] in steps]
    done = max(r[0] for r in net.trace.rows if r[2] in ("PS_MULTICAST", "PS_RELAYED",
                                                        "COMPLETE_MULTICAST"))
    print(f"case {case}: {where}")
    print(f"  dropped {hits[0][2]} job {hits[0][3]} seq {hits[0][4]}")
    print(f"  recovery: {' -> '.join(steps)}")
    print(f"  finished at {done / PS_PER_US:.1f} us, {len(seen)} recovery events, "
          f"problems: {net.exactly_once(frags) or 'none'}")
# -

# ## Random loss at scale
#
# Two jobs of four workers share 32 aggregators. Over a spread of seeds
# and loss rates every worker still receives every result exactly once.

# +
from inasim.scripted import random_two_job_run
from inasim.switchd import ESA

for loss in (0.0, 0.001, 0.01):
    drops = bad = 0
    for seed in range(20):
        net = random_two_job_run(ESA, loss, seed)
        drops += net.sim.dropped
        bad += bool(net.exactly_once({1: 64, 2: 64}))
    print(f"loss {loss:5.3f}: {drops:4d} packets dropped over 20 runs, {bad} runs with problems")
