"""Per-worker client: GET/INC/CLOCK over a staleness-gated LRU cache.

Reads are generators so a worker can block cooperatively::

    x = yield from client.get(row)     # may yield WAIT_* to the event loop
    client.inc(row, delta)
    client.clock()

The simulator resumes a blocked worker whenever its client receives a reply
or push, and the gate is re-evaluated.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .core import ConsistencyConfig, Model, RowKey
from .transport import (
    ClockTick,
    IncBatch,
    Message,
    MessageKind,
    ReadRequest,
    RowSnapshot,
    client_endpoint,
    server_endpoint,
)
from .server import Admission

if TYPE_CHECKING:
    from .server import VapCoordinator


class Wait:
    __slots__ = ("reason",)

    def __init__(self, reason: str) -> None:
        self.reason = reason

    def __repr__(self) -> str:
        return f"Wait({self.reason!r})"


WAIT_GATE = Wait("gate")
WAIT_VAP = Wait("vap")


class CacheEntry:
    __slots__ = ("values", "c_param", "applied")

    def __init__(self, values: np.ndarray, c_param: int, applied: int) -> None:
        self.values = values
        self.c_param = c_param
        self.applied = applied


class ClientCache:
    """Row cache with least-recently-used eviction.

    ``capacity=None`` means unbounded. Rows listed in ``protect`` (rows with
    buffered updates, rows of an in-progress read) are never evicted, so the
    cache may temporarily exceed capacity when everything is protected.
    """

    def __init__(self, capacity: Optional[int] = None) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: OrderedDict[RowKey, CacheEntry] = OrderedDict()
        self.evictions = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, row: RowKey) -> bool:
        return row in self.entries

    def peek(self, row: RowKey) -> Optional[CacheEntry]:
        return self.entries.get(row)

    def touch(self, row: RowKey) -> None:
        self.entries.move_to_end(row)

    @property
    def lru_order(self) -> list[RowKey]:
        return list(self.entries)

    def put(self, row: RowKey, entry: CacheEntry, protect: Iterable[RowKey] = ()) -> list[RowKey]:
        self.entries[row] = entry
        self.entries.move_to_end(row)
        return self.evict_lru(protect)

    def evict_lru(self, protect: Iterable[RowKey] = ()) -> list[RowKey]:
        if self.capacity is None or len(self.entries) <= self.capacity:
            return []
        keep = set(protect)
        evicted = []
        for row in list(self.entries):
            if len(self.entries) <= self.capacity:
                break
            if row in keep:
                continue
            del self.entries[row]
            evicted.append(row)
        self.evictions += len(evicted)
        return evicted


class Client:
    """Client library of one worker."""

    def __init__(
        self,
        worker: int,
        config: ConsistencyConfig,
        network,
        row_width: int,
        n_shards: int = 1,
        capacity: Optional[int] = None,
        coordinator: Optional["VapCoordinator"] = None,
    ) -> None:
        self.worker = worker
        self.endpoint = client_endpoint(worker)
        self.config = config
        self.network = network
        self.row_width = row_width
        self.n_shards = n_shards
        self.coordinator = coordinator if config.model is Model.VAP else None
        self.cache = ClientCache(capacity)
        self.c_worker = 0
        self.local_updates: dict[RowKey, np.ndarray] = {}
        self.last_t: Optional[int] = None

        self._s = config.staleness
        self._gated = config.clock_gated
        self._rmw = config.read_my_writes
        self._callback_mode = config.model in (Model.ESSP, Model.VAP)
        self._registered: set[RowKey] = set()
        self._outstanding: set[RowKey] = set()
        self._pinned: tuple[RowKey, ...] = ()
        # own flushed batches not yet known to be reflected by the server
        self._unacked: list[dict[int, dict[RowKey, np.ndarray]]] = [{} for _ in range(n_shards)]

        # staleness samples, one per successful row read
        self.sample_clock: list[int] = []
        self.sample_cparam: list[int] = []
        self.sample_applied: list[int] = []
        self.sample_shard: list[int] = []
        self.stale_drops = 0
        self.requests_sent = 0
        self.on_clock = None

    # ------------------------------------------------------------------- GET

    def _needs_refresh(self, row: RowKey) -> bool:
        entry = self.cache.entries.get(row)
        if entry is None:
            return True
        return self._gated and entry.c_param < self.c_worker - self._s

    def _request(self, row: RowKey) -> None:
        if row in self._outstanding:
            return
        if self._callback_mode and row in self._registered and row in self.cache:
            return  # a push will bring it
        shard = row % self.n_shards
        req = ReadRequest(self.worker, self.c_worker, row, self.c_worker - self._s)
        self.network.post(MessageKind.READ_REQUEST, self.endpoint, server_endpoint(shard), req)
        self._outstanding.add(row)
        self.requests_sent += 1

    def read(self, rows: Iterable[RowKey]):
        """Generator: return views of ``rows`` once every row passes the gate.

        All rows are checked in the same event-loop step, so under VAP the
        admission decision and the read are atomic.
        """
        rows = tuple(rows)
        self._pinned = rows
        try:
            while True:
                stale = [r for r in rows if self._needs_refresh(r)]
                if stale:
                    for r in stale:
                        self._request(r)
                    yield WAIT_GATE
                    continue
                if self.coordinator is not None:
                    if self.coordinator.vap_admit(self.worker, rows) is Admission.DEFER:
                        self.coordinator.defer(self.worker, rows)
                        yield WAIT_VAP
                        continue
                    self.last_t = self.coordinator.admitted()
                break
        finally:
            self._pinned = ()
        views = []
        entries = self.cache.entries
        for r in rows:
            entry = entries[r]
            entries.move_to_end(r)
            views.append(self._view(r, entry))
            self.sample_clock.append(self.c_worker)
            self.sample_cparam.append(entry.c_param)
            self.sample_applied.append(entry.applied)
            self.sample_shard.append(r % self.n_shards)
        return views

    def get(self, row: RowKey):
        """Generator form of GET for a single row."""
        views = yield from self.read((row,))
        return views[0]

    def _view(self, row: RowKey, entry: CacheEntry) -> np.ndarray:
        if self._rmw:
            pending = self.local_updates.get(row)
            if pending is not None:
                return entry.values + pending
        return entry.values

    # ------------------------------------------------------------------- INC

    def inc(self, row: RowKey, delta) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.row_width,):
            raise ValueError(f"delta length {delta.shape} does not match row width {self.row_width}")
        prev = self.local_updates.get(row)
        self.local_updates[row] = delta.copy() if prev is None else prev + delta
        if self.coordinator is not None:
            self.coordinator.on_generated(self.worker, self.c_worker, row, delta)

    # ----------------------------------------------------------------- CLOCK

    def clock(self) -> None:
        """Flush this clock's coalesced updates, send the tick, advance ``c_worker``."""
        c = self.c_worker
        per_shard: list[list] = [[] for _ in range(self.n_shards)]
        for row in sorted(self.local_updates):
            per_shard[row % self.n_shards].append((row, self.local_updates[row]))
        for shard, entries in enumerate(per_shard):
            self.network.post(
                MessageKind.INC_BATCH, self.endpoint, server_endpoint(shard), IncBatch(self.worker, c, entries)
            )
        for shard in range(self.n_shards):
            self.network.post(MessageKind.CLOCK_TICK, self.endpoint, server_endpoint(shard), ClockTick(self.worker, c))
        if self._rmw:
            for shard, entries in enumerate(per_shard):
                if not entries:
                    continue
                self._unacked[shard][c] = dict(entries)
                for row, delta in entries:
                    entry = self.cache.entries.get(row)
                    if entry is not None:
                        entry.values = entry.values + delta
        self.local_updates = {}
        self.c_worker = c + 1
        if self.on_clock is not None:
            self.on_clock(self.worker, c)

    # --------------------------------------------------------- server input

    def handle(self, msg: Message) -> None:
        if msg.kind is MessageKind.READ_REPLY:
            self._outstanding.discard(msg.payload.row)
            if self._callback_mode:
                self._registered.add(msg.payload.row)
            self._install(msg.payload)
        elif msg.kind is MessageKind.PUSH_ROW:
            self._install(msg.payload)
        else:
            raise ValueError(f"client cannot handle {msg.kind.value}")

    def apply_push(self, row: RowKey, values, c_param: int, applied: Optional[int] = None) -> bool:
        """Install a pushed row; returns False when the push is stale and dropped."""
        snap = RowSnapshot(row, values, c_param, c_param if applied is None else applied)
        return self._install(snap)

    def _install(self, snap: RowSnapshot) -> bool:
        row = snap.row
        shard = row % self.n_shards
        if self._rmw:
            unacked = self._unacked[shard]
            if unacked:
                wm, above = snap.own_watermark, snap.own_above
                for clock in [k for k in unacked if k < wm or k in above]:
                    del unacked[clock]
        entry = self.cache.entries.get(row)
        if entry is not None and (snap.c_param, snap.applied) <= (entry.c_param, entry.applied):
            self.stale_drops += 1
            return False
        values = snap.values
        if self._rmw:
            for clock in sorted(self._unacked[shard]):
                delta = self._unacked[shard][clock].get(row)
                if delta is not None:
                    values = values + delta
        protect = set(self.local_updates)
        protect.update(self._pinned)
        protect.add(row)
        self.cache.put(row, CacheEntry(values, snap.c_param, snap.applied), protect)
        return True

    def evict_lru(self) -> list[RowKey]:
        protect = set(self.local_updates)
        protect.update(self._pinned)
        return self.cache.evict_lru(protect)
