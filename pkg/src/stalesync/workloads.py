"""Data-parallel SGD programs written against GET/INC/CLOCK.

Two workloads share one interface:

* :class:`MfWorkload` -- SGD matrix factorization ``D ~ L R`` on observed
  entries, with ``L`` rows keyed ``0..N-1`` and ``R`` columns keyed
  ``N..N+M-1`` in a single table of width ``K``.
* :class:`LsqWorkload` -- distributed least squares
  ``f(x) = sum_t 0.5 * (a_t . x - b_t)^2`` stored as one row of width ``d``.
  Worker ``p`` at clock ``c`` processes component ``t = c*P + p`` with step
  ``eta0 / sqrt(t + 1)``, so the update sequence is clock-major by
  construction.

Each workload can run distributed (:func:`run_workload`) or single-threaded
(:func:`sequential_oracle`); both produce a :class:`Trace`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import ConsistencyConfig, Model, StepSchedule, step_size
from .sim import Compute, SimResult, Simulation
from .transport import DelayModel


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class SparseMatrix:
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and vals must be 1-d arrays of equal length")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("matrix dimensions must be positive")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_rows or cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("entry index out of range")
        if np.unique(rows * self.n_cols + cols).size != rows.size:
            raise ValueError("duplicate (i, j) entry")
        for name, arr in (("rows", rows), ("cols", cols), ("vals", vals)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense values (zeros where unobserved) and the observation mask."""
        d = np.zeros((self.n_rows, self.n_cols))
        mask = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        d[self.rows, self.cols] = self.vals
        mask[self.rows, self.cols] = True
        return d, mask

    def write(self, path: Union[str, Path]) -> None:
        lines = [f"{self.n_rows} {self.n_cols} {self.nnz}"]
        lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: Union[str, Path]) -> "SparseMatrix":
        text = Path(path).read_text().split("\n")
        header = text[0].split()
        if len(header) != 3:
            raise ValueError(f"{path}:1: expected 'n_rows n_cols nnz'")
        n_rows, n_cols, nnz = (int(x) for x in header)
        rows, cols, vals = [], [], []
        for lineno, line in enumerate(text[1:], start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'i j value'")
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
        if len(rows) != nnz:
            raise ValueError(f"{path}: header says {nnz} entries, found {len(rows)}")
        return cls(n_rows, n_cols, np.array(rows), np.array(cols), np.array(vals))


@dataclass(frozen=True)
class PlantedMf:
    matrix: SparseMatrix
    L: np.ndarray
    R: np.ndarray
    noise_floor: float


def planted_mf(
    n_rows: int = 300,
    n_cols: int = 200,
    rank: int = 5,
    density: float = 0.3,
    noise_var: float = 0.01,
    seed: int = 0,
) -> PlantedMf:
    """Observed entries of ``L* R* + noise`` from planted rank-``rank`` factors.

    Factor entries are N(0, 1/sqrt(rank)) so that products have unit variance.
    ``noise_floor`` is the squared loss of the planted factors on the
    observed entries.
    """
    rng = np.random.default_rng(seed)
    scale = rank ** -0.25
    L = rng.normal(0.0, scale, size=(n_rows, rank))
    R = rng.normal(0.0, scale, size=(rank, n_cols))
    nnz = int(round(density * n_rows * n_cols))
    flat = np.sort(rng.choice(n_rows * n_cols, size=nnz, replace=False))
    rows, cols = flat // n_cols, flat % n_cols
    noise = rng.normal(0.0, math.sqrt(noise_var), size=nnz)
    vals = np.einsum("ek,ke->e", L[rows], R[:, cols]) + noise
    return PlantedMf(SparseMatrix(n_rows, n_cols, rows, cols, vals), L, R, float(np.sum(noise**2)))


@dataclass(frozen=True)
class LsqData:
    A: np.ndarray
    b: np.ndarray
    x_true: np.ndarray


def synthetic_lsq(dimension: int, n_components: int, noise: float = 1.0, seed: int = 0) -> LsqData:
    """Components ``a_t ~ N(0, I/d)`` and ``b_t = a_t . x_true + noise * N(0, 1)``."""
    rng = np.random.default_rng(seed)
    x_true = rng.normal(0.0, 1.0, size=dimension)
    A = rng.normal(0.0, 1.0 / math.sqrt(dimension), size=(n_components, dimension))
    b = A @ x_true + noise * rng.normal(size=n_components)
    return LsqData(A, b, x_true)


def write_lsq(data: LsqData, path: Union[str, Path]) -> None:
    """Plain-text components: header ``n d``, then ``a_1 .. a_d b`` per line."""
    n, d = data.A.shape
    lines = [f"{n} {d}"]
    for a, b in zip(data.A.tolist(), data.b.tolist()):
        lines.append(" ".join(f"{v:.17g}" for v in a) + f" {b:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_lsq(path: Union[str, Path]) -> LsqData:
    text = Path(path).read_text().split("\n")
    n, d = (int(x) for x in text[0].split())
    body = np.array([[float(v) for v in line.split()] for line in text[1:] if line.strip()])
    if body.shape != (n, d + 1):
        raise ValueError(f"{path}: expected {n} lines of {d + 1} numbers")
    return LsqData(body[:, :d].copy(), body[:, d].copy(), np.full(d, np.nan))


# ---------------------------------------------------------------------- updates


def mf_sgd_step(
    i: int,
    j: int,
    D_ij: float,
    L_row: np.ndarray,
    R_col: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """SGD deltas for one observed entry; returned, not applied."""
    if L_row.shape != R_col.shape:
        raise ValueError("L_row and R_col must have the same length")
    e = D_ij - float(L_row @ R_col)
    return gamma * (e * R_col - lam * L_row), gamma * (e * L_row - lam * R_col)


def mf_objective(D_obs: SparseMatrix, L: np.ndarray, R: np.ndarray, lam: float) -> tuple[float, float]:
    """Return ``(penalized objective, squared loss)`` over the observed entries."""
    if L.shape[0] != D_obs.n_rows or R.shape[1] != D_obs.n_cols or L.shape[1] != R.shape[0]:
        raise ValueError("factor shapes do not match the matrix")
    pred = np.einsum("ek,ke->e", L[D_obs.rows], R[:, D_obs.cols])
    sq = float(np.sum((D_obs.vals - pred) ** 2))
    return sq + lam * float(np.sum(L * L) + np.sum(R * R)), sq


def lsq_sgd_step(t: int, x_view: np.ndarray, component: tuple, schedule: StepSchedule, drifted: bool = False) -> np.ndarray:
    """``-eta_t * (a . x - b) * a`` for component ``(a, b)`` at schedule index ``t``."""
    a, b = component
    eta = step_size(t, schedule, drifted)
    return (-eta * (float(a @ x_view) - b)) * a


def partition_data(n_items: int, n_workers: int) -> list[np.ndarray]:
    """Round-robin shards of item indices: worker ``p`` owns ``p, p+P, ...``."""
    if n_workers < 1:
        raise ValueError("number of workers must be >= 1")
    return [np.arange(p, n_items, n_workers, dtype=np.int64) for p in range(n_workers)]


# ------------------------------------------------------------------------ trace


@dataclass(frozen=True)
class TraceSnapshot:
    t: int
    worker: int
    clock: int
    x_tilde: np.ndarray
    x_ref: np.ndarray
    u: np.ndarray
    objective: float


@dataclass
class Trace:
    """Per-update log of one run in a fixed order.

    ``views`` holds the noisy view each update was computed from (NaN where a
    coordinate was not read); ``reference()`` replays ``x0 + sum_{t'<t} u``.
    In clock-major order that is the reference sequence; in generation order
    it is the real-time sequence.
    """

    n_workers: int
    staleness: int
    order: str
    x0: np.ndarray
    workers: np.ndarray
    clocks: np.ndarray
    gen: np.ndarray
    views: np.ndarray
    updates: np.ndarray
    losses: np.ndarray
    grad_norms: np.ndarray
    steps: np.ndarray
    _ref: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.workers.size)

    def reference(self) -> np.ndarray:
        if self._ref is None:
            stacked = np.vstack([self.x0[None, :], self.updates])
            self._ref = np.cumsum(stacked, axis=0)[:-1]
        return self._ref

    def trajectory(self) -> np.ndarray:
        """States ``x_0, x_1, ..., x_T`` of the reference sequence (``T + 1`` rows)."""
        return np.vstack([self.reference(), (self.reference()[-1] + self.updates[-1])[None, :]]) if len(self) else self.x0[None, :].copy()

    def snapshot(self, t: int) -> TraceSnapshot:
        return TraceSnapshot(
            t=t,
            worker=int(self.workers[t]),
            clock=int(self.clocks[t]),
            x_tilde=self.views[t],
            x_ref=self.reference()[t],
            u=self.updates[t],
            objective=float(self.losses[t]),
        )

    def reordered(self, order: str) -> "Trace":
        if order == "clock-major":
            idx = np.lexsort((self.workers, self.clocks))
        elif order == "generation":
            idx = np.argsort(self.gen, kind="stable")
        else:
            raise ValueError(f"unknown order {order!r}")
        return Trace(
            self.n_workers,
            self.staleness,
            order,
            self.x0,
            self.workers[idx],
            self.clocks[idx],
            self.gen[idx],
            self.views[idx],
            self.updates[idx],
            self.losses[idx],
            self.grad_norms[idx],
            self.steps[idx],
        )


class TraceRecorder:
    """Collects first-read views and flushed updates per (worker, clock)."""

    def __init__(self, workload: "Workload") -> None:
        self.workload = workload
        self._records: dict[tuple[int, int], dict] = {}
        self._gen = 0

    def on_read(self, worker: int, clock: int, rows: Sequence[int], views: Sequence[np.ndarray]) -> None:
        rec = self._records.get((worker, clock))
        if rec is None:
            rec = self._records[(worker, clock)] = {"gen": self._gen, "views": {}, "update": {}, "extra": {}}
            self._gen += 1
        seen = rec["views"]
        for r, v in zip(rows, views):
            if r not in seen:
                seen[r] = np.array(v, dtype=np.float64)

    def on_extra(self, worker: int, clock: int, **values: float) -> None:
        self._records[(worker, clock)]["extra"].update(values)

    def on_flush(self, worker: int, clock: int, update: dict) -> None:
        rec = self._records.setdefault((worker, clock), {"gen": self._gen, "views": {}, "update": {}, "extra": {}})
        rec["update"] = {r: np.array(d, dtype=np.float64) for r, d in update.items()}

    def build(self, n_workers: int, staleness: int, order: str = "clock-major") -> Trace:
        wl = self.workload
        keys = sorted(self._records, key=lambda k: (k[1], k[0]))
        T, n = len(keys), wl.n_params
        views = np.full((T, n), np.nan)
        updates = np.zeros((T, n))
        extras = {name: np.full(T, np.nan) for name in ("loss", "grad_norm", "step")}
        gen = np.zeros(T, dtype=np.int64)
        for idx, key in enumerate(keys):
            rec = self._records[key]
            gen[idx] = rec["gen"]
            for r, v in rec["views"].items():
                off = wl.offset(r)
                views[idx, off : off + wl.row_width] = v
            for r, d in rec["update"].items():
                off = wl.offset(r)
                updates[idx, off : off + wl.row_width] = d
            for name, value in rec["extra"].items():
                extras[name][idx] = value
        trace = Trace(
            n_workers,
            staleness,
            "clock-major",
            wl.flat_x0(),
            np.array([k[0] for k in keys], dtype=np.int64),
            np.array([k[1] for k in keys], dtype=np.int64),
            gen,
            views,
            updates,
            extras["loss"],
            extras["grad_norm"],
            extras["step"],
        )
        return trace if order == "clock-major" else trace.reordered(order)


# -------------------------------------------------------------------- workloads


class Workload:
    """Common surface: table layout, initial state, worker program, objective."""

    name = "workload"
    row_width: int
    n_rows_table: int

    @property
    def n_params(self) -> int:
        return self.n_rows_table * self.row_width

    def offset(self, row: int) -> int:
        return row * self.row_width

    def initial_rows(self) -> dict[int, np.ndarray]:
        raise NotImplementedError

    def flat_x0(self) -> np.ndarray:
        x = np.zeros(self.n_params)
        for r, v in self.initial_rows().items():
            x[self.offset(r) : self.offset(r) + self.row_width] = v
        return x

    def objective(self, rows: dict) -> tuple[float, float]:
        raise NotImplementedError

    def program(self, client, n_workers: int, clocks: int, compute_ticks: int, recorder: Optional[TraceRecorder]):
        raise NotImplementedError

    def oracle(self, n_workers: int, clocks: int) -> Trace:
        raise NotImplementedError


class LsqWorkload(Workload):
    name = "lsq"

    def __init__(self, data: LsqData, eta0: float, x0: Optional[np.ndarray] = None, drift_r: int = 0) -> None:
        self.A = np.ascontiguousarray(data.A, dtype=np.float64)
        self.b = np.ascontiguousarray(data.b, dtype=np.float64)
        self.data = data
        self.schedule = StepSchedule(eta0, drift_r)
        self.row_width = self.A.shape[1]
        self.n_rows_table = 1
        self.x0 = np.zeros(self.row_width) if x0 is None else np.array(x0, dtype=np.float64)
        self._gram = self.A.T @ self.A
        self._atb = self.A.T @ self.b
        self._btb = float(self.b @ self.b)
        self._solution: Optional[np.ndarray] = None

    @property
    def n_components(self) -> int:
        return self.A.shape[0]

    def initial_rows(self) -> dict[int, np.ndarray]:
        return {0: self.x0.copy()}

    def solution(self) -> np.ndarray:
        if self._solution is None:
            self._solution = np.linalg.solve(self._gram, self._atb)
        return self._solution

    def full_objective(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ self._gram @ x - 2.0 * x @ self._atb + self._btb)

    def component_losses(self, X: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """``f_t(X[k])`` for components ``idx[k]``, vectorized."""
        r = np.einsum("kd,kd->k", self.A[idx], X) - self.b[idx]
        return 0.5 * r * r

    def objective(self, rows: dict) -> tuple[float, float]:
        f = self.full_objective(rows[0])
        return f, 2.0 * f

    def _step_index(self, client, t_cm: int) -> tuple[int, bool]:
        if client.config.model is Model.VAP and client.last_t is not None:
            return max(client.last_t, self.schedule.drift_r + 1), True
        return t_cm + 1, False

    def program(self, client, n_workers, clocks, compute_ticks=1, recorder=None):
        p = client.worker
        A, b, sched = self.A, self.b, self.schedule
        for c in range(clocks):
            t_cm = c * n_workers + p
            (x,) = yield from client.read((0,))
            t, drifted = self._step_index(client, t_cm)
            a = A[t_cm]
            resid = float(a @ x) - b[t_cm]
            eta = step_size(t, sched, drifted)
            delta = (-eta * resid) * a
            client.inc(0, delta)
            if recorder is not None:
                recorder.on_read(p, c, (0,), (x,))
                recorder.on_extra(
                    p, c, loss=0.5 * resid * resid, grad_norm=abs(resid) * float(np.sqrt(a @ a)), step=eta
                )
            yield Compute(compute_ticks)
            if recorder is not None:
                recorder.on_flush(p, c, client.local_updates)
            client.clock()

    def oracle(self, n_workers: int, clocks: int) -> Trace:
        T = n_workers * clocks
        if T > self.n_components:
            raise ValueError(f"need {T} components, workload has {self.n_components}")
        d = self.row_width
        views = np.empty((T, d))
        updates = np.empty((T, d))
        losses = np.empty(T)
        grads = np.empty(T)
        steps = np.empty(T)
        x = self.x0.copy()
        A, b, sched = self.A, self.b, self.schedule
        for t in range(T):
            a = A[t]
            resid = float(a @ x) - b[t]
            eta = step_size(t + 1, sched)
            delta = (-eta * resid) * a
            views[t] = x
            updates[t] = delta
            losses[t] = 0.5 * resid * resid
            grads[t] = abs(resid) * float(np.sqrt(a @ a))
            steps[t] = eta
            pending = delta.copy()
            x = x + pending
        workers = np.arange(T, dtype=np.int64) % n_workers
        return Trace(
            n_workers, 0, "clock-major", self.x0.copy(), workers, np.arange(T, dtype=np.int64) // n_workers,
            np.arange(T, dtype=np.int64), views, updates, losses, grads, steps,
        )


class MfWorkload(Workload):
    name = "mf"

    def __init__(
        self,
        matrix: SparseMatrix,
        rank: int = 5,
        lam: float = 0.0,
        eta0: float = 0.01,
        init_scale: float = 0.1,
        seed: int = 0,
        minibatch_fraction: float = 0.1,
        decay_clocks: float = 0.0,
    ) -> None:
        if rank > min(matrix.n_rows, matrix.n_cols):
            raise ValueError("rank must not exceed min(n_rows, n_cols)")
        if not 0 < minibatch_fraction <= 1:
            raise ValueError("minibatch_fraction must be in (0, 1]")
        self.matrix = matrix
        self.rank = rank
        self.lam = lam
        self.eta0 = eta0
        self.init_scale = init_scale
        self.seed = seed
        self.minibatch_fraction = minibatch_fraction
        self.decay_clocks = decay_clocks
        self.row_width = rank
        self.n_rows_table = matrix.n_rows + matrix.n_cols
        rng = np.random.default_rng([seed, 0x1A17])
        self._L0 = rng.uniform(-init_scale, init_scale, size=(matrix.n_rows, rank))
        self._R0 = rng.uniform(-init_scale, init_scale, size=(rank, matrix.n_cols))
        self._shards: dict[int, list[np.ndarray]] = {}

    def initial_rows(self) -> dict[int, np.ndarray]:
        n = self.matrix.n_rows
        rows = {i: self._L0[i].copy() for i in range(n)}
        rows.update({n + j: self._R0[:, j].copy() for j in range(self.matrix.n_cols)})
        return rows

    def factors(self, rows: dict) -> tuple[np.ndarray, np.ndarray]:
        n, m = self.matrix.n_rows, self.matrix.n_cols
        L = np.vstack([rows[i] for i in range(n)])
        R = np.column_stack([rows[n + j] for j in range(m)])
        return L, R

    def objective(self, rows: dict) -> tuple[float, float]:
        L, R = self.factors(rows)
        return mf_objective(self.matrix, L, R, self.lam)

    def shards(self, n_workers: int) -> list[np.ndarray]:
        if n_workers not in self._shards:
            self._shards[n_workers] = partition_data(self.matrix.nnz, n_workers)
        return self._shards[n_workers]

    def minibatch(self, n_workers: int, worker: int, clock: int) -> np.ndarray:
        """Entry indices visited by ``worker`` at ``clock`` (seeded shuffle per clock)."""
        shard = self.shards(n_workers)[worker]
        size = max(1, int(round(self.minibatch_fraction * shard.size)))
        rng = np.random.default_rng([self.seed, worker, clock])
        return shard[rng.choice(shard.size, size=size, replace=False)]

    def gamma(self, clock: int) -> float:
        """Step size at ``clock``: ``eta0 / (1 + clock / decay_clocks)``, constant if 0."""
        if self.decay_clocks <= 0:
            return self.eta0
        return self.eta0 / (1.0 + clock / self.decay_clocks)

    def program(self, client, n_workers, clocks, compute_ticks=1, recorder=None):
        p = client.worker
        m = self.matrix
        n = m.n_rows
        rows_i, cols_j, vals = m.rows, m.cols, m.vals
        lam = self.lam
        for c in range(clocks):
            gamma = self.gamma(c)
            for e in self.minibatch(n_workers, p, c).tolist():
                i, j = int(rows_i[e]), int(cols_j[e])
                keys = (i, n + j)
                L_row, R_col = yield from client.read(keys)
                if recorder is not None:
                    recorder.on_read(p, c, keys, (L_row, R_col))
                err = vals[e] - float(L_row @ R_col)
                client.inc(i, gamma * (err * R_col - lam * L_row))
                client.inc(n + j, gamma * (err * L_row - lam * R_col))
                yield Compute(compute_ticks)
            if recorder is not None:
                recorder.on_flush(p, c, client.local_updates)
            client.clock()

    def oracle(self, n_workers: int, clocks: int) -> Trace:
        """Clock-major replay with zero staleness, one coalesced commit per (worker, clock)."""
        m = self.matrix
        n = m.n_rows
        state = self.initial_rows()
        recorder = TraceRecorder(self)
        for c in range(clocks):
            gamma = self.gamma(c)
            for p in range(n_workers):
                pending: dict[int, np.ndarray] = {}
                for e in self.minibatch(n_workers, p, c).tolist():
                    i, j = int(m.rows[e]), int(m.cols[e])
                    keys = (i, n + j)
                    views = [state[k] + pending[k] if k in pending else state[k] for k in keys]
                    recorder.on_read(p, c, keys, views)
                    L_row, R_col = views
                    err = m.vals[e] - float(L_row @ R_col)
                    for k, d in ((i, gamma * (err * R_col - self.lam * L_row)), (n + j, gamma * (err * L_row - self.lam * R_col))):
                        pending[k] = d.copy() if k not in pending else pending[k] + d
                recorder.on_flush(p, c, pending)
                for k in sorted(pending):
                    state[k] = state[k] + pending[k]
        return recorder.build(n_workers, 0)


# ------------------------------------------------------------------------- runs


def sequential_oracle(workload: Workload, n_workers: int, clocks: int) -> Trace:
    """Single-threaded, zero-staleness replay in clock-major order."""
    return workload.oracle(n_workers, clocks)


@dataclass
class RunOutput:
    trace: Optional[Trace]
    result: SimResult
    workload: Workload
    n_workers: int
    clocks: int
    compute_ticks: int

    @property
    def diverged(self) -> bool:
        return self.result.diverged

    def final_objective(self) -> tuple[float, float]:
        return self.result.objective_points[-1][2:]


def run_workload(
    workload: Workload,
    config: ConsistencyConfig,
    n_workers: int,
    clocks: int,
    delays: Optional[DelayModel] = None,
    compute_ticks: int = 1,
    n_shards: int = 1,
    cache_capacity: Optional[int] = None,
    coordinator_enabled: bool = True,
    record_trace: bool = True,
    objective_every: int = 1,
    keep_event_trace: bool = True,
    divergence_factor: float = 1e6,
) -> RunOutput:
    """Run ``workload`` on ``n_workers`` simulated workers for ``clocks`` clocks.

    The objective is evaluated on the server state at every table-clock
    advance (every ``objective_every``-th); a run whose objective exceeds
    ``divergence_factor`` times its initial value, or becomes non-finite, is
    halted and flagged diverged.
    """
    if isinstance(workload, LsqWorkload) and n_workers * clocks > workload.n_components:
        raise ValueError("not enough least-squares components for this many clocks")
    sim = Simulation(
        config,
        n_workers,
        workload.row_width,
        workload.initial_rows(),
        delays=delays,
        n_shards=n_shards,
        cache_capacity=cache_capacity,
        coordinator_enabled=coordinator_enabled,
        objective=workload.objective,
        objective_every=objective_every,
        divergence_factor=divergence_factor,
        keep_trace=keep_event_trace,
    )
    recorder = TraceRecorder(workload) if record_trace else None
    for w in range(n_workers):
        sim.spawn(w, workload.program(sim.clients[w], n_workers, clocks, compute_ticks, recorder))
    result = sim.run()
    trace = None
    if recorder is not None and not result.diverged:
        trace = recorder.build(n_workers, config.staleness)
    return RunOutput(trace, result, workload, n_workers, clocks, compute_ticks)


def tune_mf_eta(
    matrix: SparseMatrix,
    grid: Sequence[float],
    n_workers: int,
    clocks: int,
    target_loss: float,
    delays: Optional[DelayModel] = None,
    **mf_kwargs,
) -> float:
    """Largest step in ``grid`` that still converges with staleness 0.

    Converging means no divergence flag and a final squared loss at or below
    ``target_loss``. Raises ``ValueError`` when no step qualifies.
    """
    for eta in sorted(grid, reverse=True):
        wl = MfWorkload(matrix, eta0=eta, **mf_kwargs)
        out = run_workload(
            wl, ConsistencyConfig.ssp(0), n_workers, clocks, delays=delays, record_trace=False, keep_event_trace=False
        )
        if not out.diverged and out.final_objective()[1] <= target_loss:
            return float(eta)
    raise ValueError("no step size in the grid converges at staleness 0")
