"""Post-hoc instrumentation and theory checks over simulation output.

Everything here is computed after a run from the logs it produced: read
samples, the event trace, the update trace and the objective points. Nothing
feeds back into the simulation.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .core import Model, vap_threshold
from .sim import SimResult
from .workloads import LsqWorkload, RunOutput, Trace, Workload


def fmt(x: float) -> str:
    """17 significant digits, so equal floats always print equal bytes."""
    return f"{float(x):.17g}"


# -------------------------------------------------------------- staleness


@dataclass(frozen=True)
class ReadStalenessSample:
    worker: int
    c_worker: int
    c_param: int

    @property
    def differential(self) -> int:
        return (self.c_param - 1) - self.c_worker


def read_samples(result: SimResult) -> list[ReadStalenessSample]:
    s = result.samples
    return [
        ReadStalenessSample(int(w), int(c), int(p))
        for w, c, p in zip(s["worker"], s["clock"], s["c_param"])
    ]


def differentials(result: SimResult) -> np.ndarray:
    """Clock differential ``(c_param - 1) - c_worker`` of every read, in read order per worker."""
    return result.samples["c_param"] - 1 - result.samples["clock"]


@dataclass(frozen=True)
class StalenessHistogram:
    bins: np.ndarray
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def as_dict(self) -> dict[int, float]:
        return {int(b): float(n) for b, n in zip(self.bins, self.normalized) if n > 0}

    @property
    def mean(self) -> float:
        return float(np.dot(self.bins, self.counts) / self.counts.sum())


def staleness_histogram(diffs: Union[np.ndarray, Sequence[int]], staleness: Optional[int] = None) -> StalenessHistogram:
    """Normalized histogram of clock differentials.

    Bins run from ``-staleness - 1`` (or the smallest observed value, if
    lower or if ``staleness`` is None) to the largest observed value.
    """
    d = np.asarray(diffs, dtype=np.int64)
    if d.size == 0:
        raise ValueError("staleness histogram needs at least one sample")
    lo = int(d.min()) if staleness is None else min(int(d.min()), -staleness - 1)
    hi = int(d.max())
    bins = np.arange(lo, hi + 1)
    counts = np.bincount(d - lo, minlength=bins.size).astype(np.int64)
    return StalenessHistogram(bins, counts)


def arrivals_from_trace(trace: Iterable[tuple], n_shards: int) -> list[list[tuple[int, int]]]:
    """Rebuild each shard's batch application order ``[(worker, clock), ...]`` from the event trace.

    A client sends exactly one IncBatch per shard per clock, in clock order,
    and the trace keeps each message's send sequence number. Delivery may
    reorder a link, so a batch's clock is its rank by send sequence among the
    IncBatch messages on its ``(c{p}, s{k})`` link.
    """
    delivered = [(int(src[1:]), int(dst[1:]), seq) for _, kind, src, dst, seq in trace if kind == "IncBatch"]
    sends: dict[tuple[int, int], list[int]] = {}
    for p, k, seq in delivered:
        sends.setdefault((p, k), []).append(seq)
    clock_of = {seq: c for link in sends.values() for c, seq in enumerate(sorted(link))}
    arrivals: list[list[tuple[int, int]]] = [[] for _ in range(n_shards)]
    for p, k, seq in delivered:
        arrivals[k].append((p, clock_of[seq]))
    return arrivals


@dataclass(frozen=True)
class SafetyReport:
    reads: int
    violations: int
    min_differential: int


def ssp_safety_audit(result: SimResult, staleness: int, n_shards: int = 1) -> SafetyReport:
    """Count reads whose snapshot misses a batch from a clock ``<= c - s - 1``.

    Each read records how many batches its shard had applied when the
    snapshot was taken (``applied``). The read is safe iff every worker's
    batch for every clock up to ``c - s - 1`` sits within that prefix of the
    shard's arrival order, which is reconstructed from the event trace.
    """
    if not result.trace:
        raise ValueError("safety audit needs the event trace (keep_event_trace=True)")
    P = result.n_workers
    per_shard = arrivals_from_trace(result.trace, n_shards)
    s = result.samples
    violations = 0
    for k, log in enumerate(per_shard):
        n_clocks = max((c for _, c in log), default=-1) + 1
        # need[c] = arrival prefix length that contains all batches of clocks <= c
        pos = np.full((max(n_clocks, 1), P), np.iinfo(np.int64).max, dtype=np.int64)
        for idx, (p, c) in enumerate(log):
            pos[c, p] = idx + 1
        need = np.maximum.accumulate(pos.max(axis=1))
        mask = s["shard"] == k
        clocks, applied = s["clock"][mask], s["applied"][mask]
        last = clocks - staleness - 1
        checked = last >= 0
        if not checked.any():
            continue
        idx = np.minimum(last[checked], need.size - 1)
        required = need[idx]
        # reads beyond the last logged clock need batches that never arrived
        required = np.where(last[checked] >= need.size, np.iinfo(np.int64).max, required)
        violations += int(np.sum(applied[checked] < required))
    d = differentials(result)
    return SafetyReport(int(d.size), violations, int(d.min()) if d.size else 0)


# ------------------------------------------------------------------ regret


def regret_series(
    trace: Trace,
    workload: Workload,
    n_points: int = 30,
    t_min: int = 1,
    t_max: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative ``R[X]/T`` at logarithmically spaced ``T``.

    ``R[X] = sum_{t<T} f_t(x~_t) - f_t(x*)`` with ``x*`` the minimizer over
    all components of the workload.
    """
    if not isinstance(workload, LsqWorkload):
        raise ValueError("regret needs a convex workload with a known minimizer")
    if trace.order != "clock-major":
        trace = trace.reordered("clock-major")
    T = len(trace)
    if T == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    x_star = workload.solution()
    comp = trace.clocks * trace.n_workers + trace.workers
    opt = workload.component_losses(np.broadcast_to(x_star, (T, x_star.size)), comp)
    excess = np.cumsum(trace.losses - opt)
    t_max = T if t_max is None else min(t_max, T)
    Ts = np.unique(np.logspace(math.log10(max(t_min, 1)), math.log10(t_max), n_points).astype(np.int64))
    return Ts, excess[Ts - 1] / Ts


def loglog_slope(Ts: np.ndarray, values: np.ndarray, lo: float = 1e2, hi: float = 1e5) -> float:
    """Least-squares slope of ``log(values)`` against ``log(T)`` for ``lo <= T <= hi``.

    Non-positive values cannot be placed on a log axis; they make the slope NaN.
    """
    sel = (Ts >= lo) & (Ts <= hi)
    if sel.sum() < 2:
        raise ValueError("need at least two points in the fit range")
    y = values[sel]
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(Ts[sel]), np.log(y), 1)[0])


# ---------------------------------------------------- staleness decomposition


@dataclass(frozen=True)
class StalenessDecomposition:
    t: int
    u_bar: float
    gamma_norm: float
    window_size: int


def _diff_norm(x_tilde: np.ndarray, x_ref: np.ndarray) -> float:
    d = np.asarray(x_tilde, dtype=np.float64) - np.asarray(x_ref, dtype=np.float64)
    d = d[~np.isnan(d)]  # coordinates the worker did not read
    return float(np.sqrt(np.dot(d, d)))


def decompose_staleness(
    t: int,
    x_tilde: np.ndarray,
    x_ref: np.ndarray,
    window_updates: Sequence[np.ndarray],
    n_workers: int,
    staleness: int,
) -> StalenessDecomposition:
    """Write ``x~_t = x_t + u_bar * gamma_t``; returns ``u_bar`` and ``||gamma_t||``."""
    norm_sum = math.fsum(float(np.linalg.norm(u)) for u in window_updates)
    u_bar = norm_sum / (n_workers * (2 * staleness + 1))
    dist = _diff_norm(x_tilde, x_ref)
    gamma = dist / u_bar if u_bar > 0 else 0.0
    return StalenessDecomposition(t, u_bar, gamma, len(window_updates))


@dataclass
class GammaAudit:
    """Per-step staleness decomposition over a whole clock-major trace."""

    n_workers: int
    staleness: int
    u_bar: np.ndarray
    gamma_norm: np.ndarray
    distance: np.ndarray
    step_bound: np.ndarray
    lipschitz: float
    slack: float = 1e-9

    @property
    def bound(self) -> float:
        return float(self.n_workers * (2 * self.staleness + 1))

    @property
    def gamma_violations(self) -> int:
        return int(np.sum(self.gamma_norm > self.bound + self.slack))

    @property
    def u_bar_violations(self) -> int:
        ok = ~np.isnan(self.step_bound)
        return int(np.sum(self.u_bar[ok] > self.step_bound[ok] + self.slack))

    @property
    def degenerate(self) -> int:
        """Steps with an empty window but a view that differs from the reference."""
        return int(np.sum((self.u_bar == 0) & (self.distance > 0)))

    @property
    def max_ratio(self) -> float:
        return float(self.gamma_norm.max() / self.bound) if self.gamma_norm.size else 0.0

    @property
    def mu_gamma(self) -> float:
        return float(self.gamma_norm.mean()) if self.gamma_norm.size else 0.0

    @property
    def sigma_gamma(self) -> float:
        """Sample variance of ``||gamma_t||``."""
        return float(self.gamma_norm.var(ddof=1)) if self.gamma_norm.size > 1 else 0.0

    def autocorrelation(self, lag: int = 1) -> float:
        g = self.gamma_norm - self.gamma_norm.mean()
        denom = float(np.dot(g, g))
        if g.size <= lag or denom == 0:
            return 0.0
        return float(np.dot(g[:-lag], g[lag:]) / denom)


def gamma_audit(trace: Trace, slack: float = 1e-9) -> GammaAudit:
    """Decompose every step of a clock-major trace against the reference sequence.

    The window of step ``(p, c)`` is all workers' updates from clocks
    ``[c - s, c + s - 1]``. The Lipschitz estimate is the largest gradient
    norm observed in the trace; the step bound is ``eta_t * L``.
    """
    if trace.order != "clock-major":
        trace = trace.reordered("clock-major")
    P, s = trace.n_workers, trace.staleness
    T = len(trace)
    x_ref = trace.reference()
    diff = trace.views - x_ref
    distance = np.sqrt(np.nansum(diff * diff, axis=1)) if T else np.zeros(0)
    norms = np.linalg.norm(trace.updates, axis=1)
    n_clocks = int(trace.clocks.max()) + 1 if T else 0
    per_clock = np.zeros(n_clocks)
    np.add.at(per_clock, trace.clocks, norms)
    prefix = np.concatenate([[0.0], np.cumsum(per_clock)])
    lo = np.clip(trace.clocks - s, 0, n_clocks)
    hi = np.clip(trace.clocks + s, 0, n_clocks)  # exclusive end: clock c+s-1
    u_bar = (prefix[hi] - prefix[lo]) / (P * (2 * s + 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(u_bar > 0, distance / np.where(u_bar > 0, u_bar, 1.0), 0.0)
    grads = trace.grad_norms
    lipschitz = float(np.nanmax(grads)) if T and not np.all(np.isnan(grads)) else float("nan")
    step_bound = trace.steps * lipschitz
    return GammaAudit(P, s, u_bar, gamma, distance, step_bound, lipschitz, slack)


# ---------------------------------------------------------------- variance


@dataclass(frozen=True)
class VarianceSeries:
    var: np.ndarray
    n_replicas: int

    def decreasing_fraction(self, start_fraction: float = 0.75) -> float:
        """Fraction of steps ``t`` in the tail with ``var_{t+1} <= var_t``."""
        tail = self.var[int(start_fraction * self.var.size) :]
        if tail.size < 2:
            return 1.0
        return float(np.mean(np.diff(tail) <= 0))

    def positive_fraction(self, start_fraction: float = 0.75) -> float:
        tail = self.var[int(start_fraction * self.var.size) :]
        return float(np.mean(tail > 0)) if tail.size else 0.0


def variance_series(traces: Sequence[Trace]) -> VarianceSeries:
    """Sum over coordinates of the across-replica variance of the noisy view at each step."""
    if not traces:
        raise ValueError("need at least one replica")
    shapes = {t.views.shape for t in traces}
    if len(shapes) != 1:
        raise ValueError(f"replica traces have mismatched shapes {sorted(shapes)}")
    views = np.stack([t.reordered("clock-major").views if t.order != "clock-major" else t.views for t in traces])
    var = np.nansum(views.var(axis=0), axis=1)
    return VarianceSeries(var, len(traces))


# --------------------------------------------------------------------- VAP


def vap_audit(trace: Trace, v0: float) -> float:
    """``max_t ||x_breve_t - x_hat_t||_inf - v_t`` over a VAP run; ``<= 0`` means the bound held.

    ``x_hat_t`` is the real-time sequence: the initial state plus every update
    generated before step ``t`` in generation order.
    """
    gen = trace if trace.order == "generation" else trace.reordered("generation")
    T = len(gen)
    if T == 0:
        return -float("inf")
    x_hat = gen.reference()
    dev = np.nanmax(np.abs(gen.views - x_hat), axis=1)
    t = np.arange(1, T + 1)
    v = np.array([vap_threshold(int(k), v0) for k in t])
    return float(np.max(dev - v))


# ---------------------------------------------------------- time breakdown


@dataclass(frozen=True)
class BreakdownRow:
    staleness: int
    model: str
    compute_ticks: int
    wait_ticks: int


def clock_accounting_errors(result: SimResult) -> int:
    """Count (clock, worker) pairs whose compute + wait differs from the clock's span."""
    bad = 0
    for worker, clock, start, end in result.clock_spans:
        key = (clock, worker)
        if result.compute.get(key, 0) + result.wait.get(key, 0) != end - start:
            bad += 1
    return bad


def time_breakdown(result: SimResult) -> BreakdownRow:
    cfg = result.config
    return BreakdownRow(
        cfg.staleness_s if cfg.model in (Model.SSP, Model.ESSP) else 0,
        cfg.model.value,
        int(sum(result.compute.values())),
        int(sum(result.wait.values())),
    )


def time_breakdown_report(results: Iterable[SimResult]) -> list[BreakdownRow]:
    """Compute vs wait totals, one row per configuration, sorted by (staleness, model)."""
    totals: dict[tuple[int, str], list[int]] = defaultdict(lambda: [0, 0])
    for r in results:
        row = time_breakdown(r)
        acc = totals[(row.staleness, row.model)]
        acc[0] += row.compute_ticks
        acc[1] += row.wait_ticks
    return [BreakdownRow(s, m, c, w) for (s, m), (c, w) in sorted(totals.items())]


# ---------------------------------------------------------------- log + CSV


@dataclass
class MetricsLog:
    """Everything one experiment writes to disk."""

    histogram: Optional[StalenessHistogram] = None
    objective: list = field(default_factory=list)
    regret: Optional[tuple[np.ndarray, np.ndarray]] = None
    gamma: Optional[GammaAudit] = None
    variance: Optional[VarianceSeries] = None
    breakdown: list = field(default_factory=list)

    def write(self, out_dir: Union[str, Path]) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "staleness.csv": self._staleness_rows(),
            "objective.csv": self._objective_rows(),
            "regret.csv": self._regret_rows(),
            "gamma.csv": self._gamma_rows(),
            "variance.csv": self._variance_rows(),
            "breakdown.csv": self._breakdown_rows(),
        }
        written = []
        for name, lines in files.items():
            path = out / name
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
        return written

    def _staleness_rows(self) -> list[str]:
        rows = ["differential,count,normalized"]
        if self.histogram is not None:
            h = self.histogram
            rows += [f"{b},{n},{fmt(z)}" for b, n, z in zip(h.bins.tolist(), h.counts.tolist(), h.normalized.tolist())]
        return rows

    def _objective_rows(self) -> list[str]:
        rows = ["clock,virtual_time,objective,squared_loss"]
        rows += [f"{c},{t},{fmt(o)},{fmt(q)}" for c, t, o, q in self.objective]
        return rows

    def _regret_rows(self) -> list[str]:
        rows = ["T,regret_over_T"]
        if self.regret is not None:
            rows += [f"{T},{fmt(v)}" for T, v in zip(self.regret[0].tolist(), self.regret[1].tolist())]
        return rows

    def _gamma_rows(self) -> list[str]:
        rows = ["t,u_bar,gamma_norm,bound"]
        if self.gamma is not None:
            g = self.gamma
            bound = fmt(g.bound)
            rows += [f"{t},{fmt(u)},{fmt(n)},{bound}" for t, (u, n) in enumerate(zip(g.u_bar.tolist(), g.gamma_norm.tolist()))]
        return rows

    def _variance_rows(self) -> list[str]:
        rows = ["t,var_t"]
        if self.variance is not None:
            rows += [f"{t},{fmt(v)}" for t, v in enumerate(self.variance.var.tolist())]
        return rows

    def _breakdown_rows(self) -> list[str]:
        rows = ["staleness,model,compute_ticks,wait_ticks"]
        rows += [f"{r.staleness},{r.model},{r.compute_ticks},{r.wait_ticks}" for r in self.breakdown]
        return rows


def collect(runs: Sequence[RunOutput]) -> MetricsLog:
    """Metrics for one configuration; ``runs`` are its replicas (first one is primary)."""
    if not runs:
        raise ValueError("need at least one run")
    first = runs[0]
    result = first.result
    log = MetricsLog(objective=list(result.objective_points))
    d = differentials(result)
    if d.size:
        log.histogram = staleness_histogram(d, result.config.staleness)
    if first.trace is not None:
        if isinstance(first.workload, LsqWorkload) and len(first.trace):
            log.regret = regret_series(first.trace, first.workload)
        log.gamma = gamma_audit(first.trace)
        traces = [r.trace for r in runs if r.trace is not None]
        if len(traces) == len(runs):
            log.variance = variance_series(traces)
    log.breakdown = time_breakdown_report(r.result for r in runs)
    return log
