"""Deterministic discrete-event driver for clients, server shards and workers.

A worker program is a generator written against the client API. It yields
:class:`Compute` to spend virtual time and the client's ``WAIT_*`` markers
when a read has to block; the driver resumes it on the matching event.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Generator, Optional

import numpy as np

from .client import Client, Wait
from .core import ConsistencyConfig, Model, RowKey
from .server import ServerShard, VapCoordinator, shard_of
from .transport import DelayModel, Network, ThreadedNetwork, Timer, endpoint_index

Program = Generator

# objective callback: server rows -> (objective, squared_loss)
ObjectiveFn = Callable[[dict], tuple]


@dataclass(frozen=True)
class Compute:
    ticks: int


class Deadlock(RuntimeError):
    pass


@dataclass
class SimResult:
    config: ConsistencyConfig
    n_workers: int
    diverged: bool
    final_time: int
    rows: dict
    objective_points: list
    compute: dict
    wait: dict
    clock_spans: list
    samples: dict
    arrivals: list
    trace: list
    stats: dict = field(default_factory=dict)


class Simulation:
    """One deterministic run: P clients, ``n_shards`` shards, one event loop."""

    def __init__(
        self,
        config: ConsistencyConfig,
        n_workers: int,
        row_width: int,
        initial_rows: Optional[dict[RowKey, np.ndarray]] = None,
        delays: Optional[DelayModel] = None,
        n_shards: int = 1,
        cache_capacity: Optional[int] = None,
        coordinator_enabled: bool = True,
        objective: Optional[ObjectiveFn] = None,
        objective_every: int = 1,
        divergence_factor: float = 1e6,
        keep_trace: bool = True,
    ) -> None:
        if n_workers < 1 or n_shards < 1:
            raise ValueError("need at least one worker and one shard")
        self.config = config
        self.n_workers = n_workers
        self.n_shards = n_shards
        self.network = Network(delays, keep_trace=keep_trace)
        self.coordinator: Optional[VapCoordinator] = None
        if config.model is Model.VAP:
            self.coordinator = VapCoordinator(
                n_workers, config.vap_v0, n_shards, config.read_my_writes, enabled=coordinator_enabled
            )
        initial_rows = initial_rows or {}
        self.shards = [
            ServerShard(
                k,
                n_workers,
                config,
                self.network,
                row_width,
                {r: v for r, v in initial_rows.items() if shard_of(r, n_shards) == k},
                coordinator=self.coordinator,
                on_advance=self._on_advance,
            )
            for k in range(n_shards)
        ]
        self.clients = [
            Client(w, config, self.network, row_width, n_shards, cache_capacity, self.coordinator)
            for w in range(n_workers)
        ]
        for c in self.clients:
            c.on_clock = self._on_clock
        if self.coordinator is not None:
            self.coordinator.attach(self.clients)

        self.objective = objective
        self.objective_every = max(1, objective_every)
        self.divergence_factor = divergence_factor
        self.objective_points: list[tuple[int, int, float, float]] = []
        self.diverged = False
        self._initial_objective: Optional[float] = None
        self._global_clock = 0

        self._procs: list[Optional[Program]] = [None] * n_workers
        self._state = ["idle"] * n_workers
        self._block_start = [0] * n_workers
        self._block_clock = [0] * n_workers
        self._clock_start = [0] * n_workers
        self.compute: dict[tuple[int, int], int] = {}
        self.wait: dict[tuple[int, int], int] = {}
        self.clock_spans: list[tuple[int, int, int, int]] = []
        self._halted = False

    # -------------------------------------------------------------- plumbing

    @property
    def now(self) -> int:
        return self.network.now

    def spawn(self, worker: int, program: Program) -> None:
        self._procs[worker] = program
        self._state[worker] = "ready"

    def server_rows(self) -> dict[RowKey, np.ndarray]:
        rows: dict[RowKey, np.ndarray] = {}
        for shard in self.shards:
            for key, row in shard.rows.items():
                rows[key] = row.values
        return rows

    def _on_clock(self, worker: int, clock: int) -> None:
        now = self.network.now
        self.clock_spans.append((worker, clock, self._clock_start[worker], now))
        self._clock_start[worker] = now

    def _on_advance(self, shard: ServerShard) -> None:
        new = min(s.table_clock for s in self.shards)
        if new > self._global_clock:
            self._global_clock = new
            if self.objective is not None and new % self.objective_every == 0:
                self._record_objective(new)

    def _record_objective(self, clock: int) -> None:
        with np.errstate(all="ignore"):
            obj, sq = self.objective(self.server_rows())
        obj, sq = float(obj), float(sq)
        self.objective_points.append((clock, self.network.now, obj, sq))
        if self._initial_objective is None:
            self._initial_objective = obj
            return
        limit = self.divergence_factor * max(abs(self._initial_objective), 1e-300)
        if not math.isfinite(obj) or obj > limit:
            self.diverged = True
            self._halted = True

    # ------------------------------------------------------------ scheduling

    def _resume(self, worker: int) -> None:
        proc = self._procs[worker]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                item = proc.send(None)
        except StopIteration:
            if self._state[worker] in ("gate", "vap"):
                self._end_wait(worker)
            self._state[worker] = "done"
            return
        now = self.network.now
        if isinstance(item, Wait):
            if self._state[worker] not in ("gate", "vap"):
                self._block_start[worker] = now
                self._block_clock[worker] = self.clients[worker].c_worker
            self._state[worker] = item.reason
            return
        if self._state[worker] in ("gate", "vap"):
            self._end_wait(worker)
        if isinstance(item, Compute):
            key = (self.clients[worker].c_worker, worker)
            self.compute[key] = self.compute.get(key, 0) + item.ticks
            self._state[worker] = "compute"
            self.network.schedule_timer(worker, now + item.ticks)
            return
        raise TypeError(f"worker {worker} yielded unsupported {item!r}")

    def _end_wait(self, worker: int) -> None:
        key = (self._block_clock[worker], worker)
        self.wait[key] = self.wait.get(key, 0) + self.network.now - self._block_start[worker]

    def _drain_vap(self) -> None:
        coord = self.coordinator
        coord.prune()
        while coord.deferred:
            worker = coord.pop_admissible()
            if worker is None:
                break
            self._resume(worker)

    def run(self, max_events: Optional[int] = None) -> SimResult:
        if self.objective is not None:
            self._record_objective(0)
        for w in range(self.n_workers):
            if self._procs[w] is not None:
                self._resume(w)
        net = self.network
        clients, shards, state = self.clients, self.shards, self._state
        vap = self.coordinator is not None
        events = 0
        while not self._halted:
            ev = net.next_event()
            if ev is None:
                break
            events += 1
            if max_events is not None and events > max_events:
                raise RuntimeError("event budget exhausted")
            if type(ev) is Timer:
                self._resume(ev.owner)
                continue
            idx = endpoint_index(ev.dst)
            if ev.dst[0] == "s":
                shards[idx].handle(ev)
                continue
            clients[idx].handle(ev)
            if state[idx] == "gate":
                self._resume(idx)
            if vap and self.coordinator.deferred:
                self._drain_vap()
        if not self._halted:
            stuck = [w for w, s in enumerate(state) if s not in ("done", "idle")]
            if stuck:
                raise Deadlock(f"workers {stuck} blocked with an empty event queue")
        return self._result()

    def _result(self) -> SimResult:
        samples: dict[str, np.ndarray] = {}
        parts = {"worker": [], "clock": [], "c_param": [], "applied": [], "shard": []}
        for c in self.clients:
            n = len(c.sample_clock)
            parts["worker"].append(np.full(n, c.worker, dtype=np.int64))
            parts["clock"].append(np.asarray(c.sample_clock, dtype=np.int64))
            parts["c_param"].append(np.asarray(c.sample_cparam, dtype=np.int64))
            parts["applied"].append(np.asarray(c.sample_applied, dtype=np.int64))
            parts["shard"].append(np.asarray(c.sample_shard, dtype=np.int64))
        for k, v in parts.items():
            samples[k] = np.concatenate(v) if v else np.zeros(0, dtype=np.int64)
        stats = {
            "messages_sent": self.network.sent,
            "messages_delivered": self.network.delivered,
            "pushes": sum(s.pushes_sent for s in self.shards),
            "callback_noops": sum(s.callback_noops for s in self.shards),
            "read_requests": sum(c.requests_sent for c in self.clients),
            "stale_push_drops": sum(c.stale_drops for c in self.clients),
            "evictions": sum(c.cache.evictions for c in self.clients),
            "table_clock": min(s.table_clock for s in self.shards),
        }
        if self.coordinator is not None:
            stats["vap_deferrals"] = self.coordinator.deferrals
            stats["vap_generated"] = self.coordinator.global_t
        return SimResult(
            config=self.config,
            n_workers=self.n_workers,
            diverged=self.diverged,
            final_time=self.network.now,
            rows={k: v.copy() for k, v in self.server_rows().items()},
            objective_points=list(self.objective_points),
            compute=dict(self.compute),
            wait=dict(self.wait),
            clock_spans=list(self.clock_spans),
            samples=samples,
            arrivals=[list(s.arrivals) for s in self.shards],
            trace=list(self.network.trace),
            stats=stats,
        )


def run_threaded(
    config: ConsistencyConfig,
    programs: list[Callable[[Client], Program]],
    row_width: int,
    initial_rows: Optional[dict[RowKey, np.ndarray]] = None,
    delays: Optional[DelayModel] = None,
    tick_seconds: float = 1e-4,
    get_timeout: float = 10.0,
) -> dict[RowKey, np.ndarray]:
    """Run worker programs on real threads; returns the final server rows.

    Only clock-gated models are supported (VAP admission needs a global view).
    A read blocked longer than ``get_timeout`` seconds raises ``TimeoutError``.
    """
    if config.model is Model.VAP:
        raise ValueError("threaded mode does not support VAP")
    n_workers = len(programs)
    net = ThreadedNetwork(delays, tick_seconds)
    shard = ServerShard(0, n_workers, config, net, row_width, initial_rows)
    net.register(shard.endpoint)
    clients = [Client(w, config, net, row_width) for w in range(n_workers)]
    for c in clients:
        net.register(c.endpoint)

    stop = threading.Event()
    errors: list[BaseException] = []

    def serve() -> None:
        while not stop.is_set():
            try:
                msg = net.recv(shard.endpoint, timeout=0.01)
            except queue.Empty:
                continue
            try:
                shard.handle(msg)
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                stop.set()

    def work(w: int) -> None:
        client = clients[w]
        proc = programs[w](client)

        def drain() -> int:
            n = 0
            while True:
                try:
                    client.handle(net.recv(client.endpoint, timeout=0))
                except queue.Empty:
                    return n
                n += 1

        try:
            item = proc.send(None)
            while True:
                if isinstance(item, Compute):
                    time.sleep(item.ticks * tick_seconds)
                    drain()
                elif isinstance(item, Wait) and drain() == 0:
                    # nothing new arrived since the gate failed: block for the next message
                    try:
                        client.handle(net.recv(client.endpoint, timeout=get_timeout))
                    except queue.Empty:
                        raise TimeoutError(f"worker {w}: get blocked longer than {get_timeout}s") from None
                item = proc.send(None)
        except StopIteration:
            pass
        except BaseException as exc:
            errors.append(exc)

    server_thread = threading.Thread(target=serve, daemon=True)
    server_thread.start()
    workers = [threading.Thread(target=work, args=(w,), daemon=True) for w in range(n_workers)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    # let in-flight batches land before reading the final state
    deadline = time.monotonic() + get_timeout
    while min(shard.completed) < max(c.c_worker for c in clients) and time.monotonic() < deadline and not errors:
        time.sleep(0.005)
    stop.set()
    server_thread.join(timeout=1.0)
    net.close()
    if errors:
        raise errors[0]
    return {k: r.values.copy() for k, r in shard.rows.items()}
