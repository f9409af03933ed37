"""
Step size, staleness and divergence in matrix factorization
===========================================================

First pick the largest step size from a grid that converges with no
staleness at all. Then push the step a little further at staleness 10:
SSP, which reads rows up to 10 clocks old, blows up, while ESSP, whose rows
are refreshed as soon as the server advances, still converges.
"""

from __future__ import annotations

from stalesync import ConsistencyConfig, DelayModel, MfWorkload, planted_mf, run_workload
from stalesync.workloads import tune_mf_eta

planted = planted_mf(seed=0)
target = 2 * planted.noise_floor
mf_kwargs = dict(rank=5, init_scale=0.1, minibatch_fraction=0.05, decay_clocks=50)
delays = DelayModel.uniform(0, 20, 7)

eta = tune_mf_eta(planted.matrix, [0.05, 0.1, 0.2], 8, 100, target, delays=delays, **mf_kwargs)
print(f"tuned step size {eta} (target squared loss {target:.1f})")

for eta0 in (eta, 0.3):
    workload = MfWorkload(planted.matrix, eta0=eta0, **mf_kwargs)
    for config in (ConsistencyConfig.ssp(10), ConsistencyConfig.essp(10)):
        out = run_workload(
            workload, config, 8, 200, delays=delays, record_trace=False, keep_event_trace=False, objective_every=5
        )
        clock, _, _, loss = out.result.objective_points[-1]
        status = "diverged" if out.diverged else "ok"
        print(f"eta {eta0:<4} {config.label:<12} clock {clock:3d} squared loss {loss:12.4g} {status}")
