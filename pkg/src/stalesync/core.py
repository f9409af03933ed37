"""Domain types, clock arithmetic, schedules and update coalescing.

Everything here is a pure function or a value type. Clocks are 0-based for
workers (every worker starts at clock 0); schedule indices are 1-based and
count global updates in clock-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

RowKey = int


class Model(str, Enum):
    BSP = "BSP"
    SSP = "SSP"
    ESSP = "ESSP"
    VAP = "VAP"


@dataclass
class ParamRow:
    """One table row: a dense float64 vector stamped with ``c_param``.

    ``c_param = x`` means every update generated at a clock ``< x`` by any
    worker has been applied to ``values``.
    """

    values: np.ndarray
    c_param: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.c_param < 0:
            raise ValueError("c_param must be non-negative")


@dataclass(frozen=True)
class Update:
    worker: int
    clock: int
    row: RowKey
    delta: np.ndarray = field(compare=False)

    def __post_init__(self) -> None:
        if self.worker < 0 or self.clock < 0 or self.row < 0:
            raise ValueError("worker, clock and row must be non-negative")
        delta = np.array(self.delta, dtype=np.float64)
        delta.flags.writeable = False
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class ConsistencyConfig:
    """Which consistency model a run uses, plus its single parameter.

    BSP is SSP with zero staleness; SSP/ESSP carry ``staleness_s`` and VAP
    carries the initial value bound ``vap_v0``.
    """

    model: Model
    staleness_s: Optional[int] = None
    vap_v0: Optional[float] = None
    read_my_writes: bool = True

    def __post_init__(self) -> None:
        model = Model(self.model)
        object.__setattr__(self, "model", model)
        if model in (Model.SSP, Model.ESSP):
            if self.staleness_s is None:
                raise ValueError(f"{model.value} requires staleness_s")
            if int(self.staleness_s) != self.staleness_s or self.staleness_s < 0:
                raise ValueError("staleness_s must be a non-negative integer")
        elif self.staleness_s is not None:
            raise ValueError(f"staleness_s is only valid for SSP/ESSP, not {model.value}")
        if model is Model.VAP:
            if self.vap_v0 is None or not self.vap_v0 > 0:
                raise ValueError("VAP requires a positive vap_v0")
        elif self.vap_v0 is not None:
            raise ValueError(f"vap_v0 is only valid for VAP, not {model.value}")

    @classmethod
    def bsp(cls, read_my_writes: bool = True) -> "ConsistencyConfig":
        return cls(Model.BSP, read_my_writes=read_my_writes)

    @classmethod
    def ssp(cls, s: int, read_my_writes: bool = True) -> "ConsistencyConfig":
        return cls(Model.SSP, staleness_s=s, read_my_writes=read_my_writes)

    @classmethod
    def essp(cls, s: int, read_my_writes: bool = True) -> "ConsistencyConfig":
        return cls(Model.ESSP, staleness_s=s, read_my_writes=read_my_writes)

    @classmethod
    def vap(cls, v0: float, read_my_writes: bool = True) -> "ConsistencyConfig":
        return cls(Model.VAP, vap_v0=v0, read_my_writes=read_my_writes)

    @property
    def staleness(self) -> int:
        """Effective staleness bound; 0 for BSP, meaningless for VAP."""
        return 0 if self.staleness_s is None else int(self.staleness_s)

    @property
    def clock_gated(self) -> bool:
        return self.model is not Model.VAP

    @property
    def eager(self) -> bool:
        return self.model is Model.ESSP

    @property
    def label(self) -> str:
        if self.model in (Model.SSP, Model.ESSP):
            return f"{self.model.value}(s={self.staleness})"
        if self.model is Model.VAP:
            return f"VAP(v0={self.vap_v0:g})"
        return "BSP"


class ClockVector:
    """Per-worker completed-clock counters with a derived minimum."""

    __slots__ = ("_clocks",)

    def __init__(self, n_workers: int) -> None:
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self._clocks = [0] * n_workers

    def __len__(self) -> int:
        return len(self._clocks)

    def __getitem__(self, worker: int) -> int:
        return self._clocks[worker]

    @property
    def clocks(self) -> tuple[int, ...]:
        return tuple(self._clocks)

    @property
    def min_clock(self) -> int:
        return min(self._clocks)

    def advance(self, worker: int) -> None:
        self._clocks[worker] += 1


@dataclass(frozen=True)
class StepSchedule:
    eta0: float
    drift_r: int = 0

    def __post_init__(self) -> None:
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if self.drift_r < 0:
            raise ValueError("drift_r must be non-negative")


def step_size(t: int, schedule: StepSchedule, drifted: bool = False) -> float:
    """``eta0 / sqrt(t)``; with ``drifted`` the local variant ``eta0 / sqrt(t - r)``."""
    if t < 1:
        raise ValueError("clock index must be >= 1")
    if drifted:
        if t <= schedule.drift_r:
            raise ValueError("drifted step size needs t > drift_r")
        t = t - schedule.drift_r
    return schedule.eta0 / math.sqrt(t)


def vap_threshold(t: int, v0: float) -> float:
    """Shrinking value bound ``v0 / sqrt(t)``."""
    if t < 1:
        raise ValueError("clock index must be >= 1")
    if not v0 > 0:
        raise ValueError("v0 must be positive")
    return v0 / math.sqrt(t)


def clock_major_index(t: int, n_workers: int) -> tuple[int, int]:
    """Map a clock-major index to ``(worker, clock) = (t mod P, t // P)``."""
    if n_workers < 1:
        raise ValueError("number of workers must be >= 1")
    if t < 0:
        raise ValueError("index must be non-negative")
    return t % n_workers, t // n_workers


def clock_major_inverse(worker: int, clock: int, n_workers: int) -> int:
    if n_workers < 1:
        raise ValueError("number of workers must be >= 1")
    if not 0 <= worker < n_workers or clock < 0:
        raise ValueError("worker or clock out of range")
    return clock * n_workers + worker


def _exact_sum(deltas: Sequence[np.ndarray]) -> np.ndarray:
    if len(deltas) == 1:
        return np.array(deltas[0], dtype=np.float64)
    stacked = np.vstack(deltas)
    return np.array([math.fsum(col) for col in stacked.T], dtype=np.float64)


def coalesce(updates: Iterable[Update]) -> list[Update]:
    """Merge a batch from one (worker, clock) into one update per row.

    Component sums are exactly rounded (``math.fsum``), so the result does not
    depend on the order of ``updates``. Output is sorted by row key.
    """
    updates = list(updates)
    if not updates:
        return []
    worker, clock = updates[0].worker, updates[0].clock
    by_row: dict[RowKey, list[np.ndarray]] = {}
    for u in updates:
        if u.worker != worker or u.clock != clock:
            raise ValueError("coalesce needs updates from a single (worker, clock)")
        bucket = by_row.setdefault(u.row, [])
        if bucket and bucket[0].shape != u.delta.shape:
            raise ValueError(f"delta length mismatch for row {u.row}")
        bucket.append(u.delta)
    return [Update(worker, clock, row, _exact_sum(by_row[row])) for row in sorted(by_row)]
