"""Bounded-staleness parameter server simulator with SGD workloads and theory checks."""

from __future__ import annotations

from .core import ConsistencyConfig, Model, StepSchedule, coalesce, step_size, vap_threshold
from .transport import DelayModel, Network
from .sim import Simulation, run_threaded
from .workloads import LsqWorkload, MfWorkload, planted_mf, run_workload, sequential_oracle, synthetic_lsq

__all__ = [
    "ConsistencyConfig",
    "DelayModel",
    "LsqWorkload",
    "MfWorkload",
    "Model",
    "Network",
    "Simulation",
    "StepSchedule",
    "coalesce",
    "planted_mf",
    "run_threaded",
    "run_workload",
    "sequential_oracle",
    "step_size",
    "synthetic_lsq",
    "vap_threshold",
]
