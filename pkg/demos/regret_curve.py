"""
Regret of distributed SGD on least squares
==========================================

Each worker takes one least-squares component per clock with step size
eta0 / sqrt(t). Under bounded staleness the average regret R[X] / T should
still fall roughly like 1 / sqrt(T), the same rate as serial SGD.
"""

from __future__ import annotations

from stalesync import ConsistencyConfig, DelayModel, LsqWorkload, run_workload, sequential_oracle, synthetic_lsq
from stalesync.metrics import loglog_slope, regret_series

P, CLOCKS = 8, 2500
workload = LsqWorkload(synthetic_lsq(10, P * CLOCKS, noise=3.0, seed=1), eta0=1.0)

traces = {"serial": sequential_oracle(workload, P, CLOCKS)}
for config in (ConsistencyConfig.ssp(3), ConsistencyConfig.essp(3)):
    out = run_workload(
        workload, config, P, CLOCKS, delays=DelayModel.uniform(0, 10, 5), objective_every=10**9, keep_event_trace=False
    )
    traces[config.label] = out.trace

# the comparator is the least-squares solution over all components
print(f"{'T':>8} " + " ".join(f"{name:>12}" for name in traces))
curves = {name: regret_series(tr, workload, n_points=12) for name, tr in traces.items()}
Ts = next(iter(curves.values()))[0]
for i, T in enumerate(Ts):
    print(f"{T:8d} " + " ".join(f"{curves[name][1][i]:12.4f}" for name in traces))

for name, (Ts, vals) in curves.items():
    print(f"{name}: log-log slope {loglog_slope(Ts, vals, lo=1e2, hi=P * CLOCKS):.3f}")
