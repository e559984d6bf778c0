# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Preemption and reminders, one packet at a time
#
# Two scripted scenarios on a single switch with every fragment pinned to
# a known aggregator, so each allocation decision shows up in the trace.

# +
from inasim.netsim import PS_PER_NS
from inasim.scripted import preemption_example, reminder_example

def show(net, seq=0):
    for t, node, event, job, s, detail in net.trace.rows:
        if s == seq and event not in ("DROP",):
            print(f"{t / PS_PER_NS / 1e3:10.3f} us  {net.role(node):7s} {event:20s} "
                  f"job={job} {detail}")
# -

# ## Eviction by a higher-priority job
#
# Job 1 (four workers, priority 100) holds aggregator 0 with two
# contributions when job 2 (priority 200) arrives. The partial sum is
# swapped out to job 1's PS, job 2 completes in the switch, and job 1's
# stragglers start a fresh partial that only a reminder can release.

# +
net, frags = preemption_example()
net.run(20)
show(net)
print("exactly-once problems:", net.exactly_once(frags))
# -

# ## A failed preemption and the dupACK reminder
#
# Job 1's first gradient meets job 2 at higher priority, so it is forwarded
# to the PS and the holder's priority is halved. Later seqs of job 1 reach
# the PS out of order; three of them make the PS send a reminder for seq 0.

# +
net, frags = reminder_example()
net.run(20)
show(net)
print("exactly-once problems:", net.exactly_once(frags))
