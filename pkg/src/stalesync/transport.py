"""Virtual-time message bus between clients and server shards.

The deterministic :class:`Network` keeps one global heap ordered by
``(deliver_time, seq)``; ``seq`` is a monotonically increasing send counter,
so the pop order is a pure function of the configuration and the delay seed.
:class:`ThreadedNetwork` offers the same ``post``/``send`` surface on top of
real threads and queues for soak tests.
"""

from __future__ import annotations

import heapq
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

Endpoint = str


def client_endpoint(worker: int) -> Endpoint:
    return f"c{worker}"


def server_endpoint(shard: int) -> Endpoint:
    return f"s{shard}"


def endpoint_index(endpoint: Endpoint) -> int:
    return int(endpoint[1:])


class MessageKind(str, Enum):
    INC_BATCH = "IncBatch"
    CLOCK_TICK = "ClockTick"
    READ_REQUEST = "ReadRequest"
    READ_REPLY = "ReadReply"
    PUSH_ROW = "PushRow"
    VAP_ADMIT_REQUEST = "VapAdmitRequest"
    VAP_ADMIT_REPLY = "VapAdmitReply"


def _frozen(values: Any) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class IncBatch:
    worker: int
    clock: int
    entries: tuple  # ((row, delta), ...) sorted by row

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "entries", tuple((int(r), _frozen(d)) for r, d in self.entries)
        )


@dataclass(frozen=True)
class ClockTick:
    worker: int
    clock: int


@dataclass(frozen=True)
class ReadRequest:
    worker: int
    clock: int
    row: int
    min_c_param: int


@dataclass(frozen=True)
class RowSnapshot:
    """Payload of ReadReply and PushRow.

    ``applied`` counts batches applied by the shard when the snapshot was
    taken; ``own_watermark``/``own_above`` tell the receiving client which of
    its own batches the values already contain.
    """

    row: int
    values: np.ndarray
    c_param: int
    applied: int
    own_watermark: int = 0
    own_above: frozenset = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class VapAdmit:
    worker: int
    t: int
    admitted: bool = False


_PAYLOAD_TYPES = {
    MessageKind.INC_BATCH: IncBatch,
    MessageKind.CLOCK_TICK: ClockTick,
    MessageKind.READ_REQUEST: ReadRequest,
    MessageKind.READ_REPLY: RowSnapshot,
    MessageKind.PUSH_ROW: RowSnapshot,
    MessageKind.VAP_ADMIT_REQUEST: VapAdmit,
    MessageKind.VAP_ADMIT_REPLY: VapAdmit,
}


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    payload: Any
    src: Endpoint
    dst: Endpoint
    send_time: int = 0
    deliver_time: int = 0
    seq: int = -1

    def __post_init__(self) -> None:
        kind = self.kind
        if type(kind) is not MessageKind:
            kind = MessageKind(kind)
            object.__setattr__(self, "kind", kind)
        if not isinstance(self.payload, _PAYLOAD_TYPES[kind]):
            raise TypeError(f"{kind.value} needs a {_PAYLOAD_TYPES[kind].__name__} payload")
        if self.deliver_time < self.send_time:
            raise ValueError("deliver_time precedes send_time")


@dataclass(frozen=True)
class Timer:
    """Internal wake-up used by the simulator; never traced."""

    owner: int
    deliver_time: int = 0
    seq: int = -1


class DelayKind(str, Enum):
    ZERO = "Zero"
    UNIFORM_INT = "UniformInt"
    PER_LINK_FIXED = "PerLinkFixed"


@dataclass(frozen=True)
class DelayModel:
    kind: DelayKind = DelayKind.ZERO
    lo: int = 0
    hi: int = 0
    links: Mapping[tuple[Endpoint, Endpoint], int] = field(default_factory=dict)
    default: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DelayKind(self.kind))
        if self.kind is DelayKind.UNIFORM_INT and not 0 <= self.lo <= self.hi:
            raise ValueError("UniformInt needs 0 <= lo <= hi")
        if self.kind is DelayKind.PER_LINK_FIXED:
            if self.default < 0 or any(v < 0 for v in self.links.values()):
                raise ValueError("link delays must be non-negative")

    @classmethod
    def zero(cls) -> "DelayModel":
        return cls(DelayKind.ZERO)

    @classmethod
    def uniform(cls, lo: int, hi: int, seed: int) -> "DelayModel":
        return cls(DelayKind.UNIFORM_INT, lo=lo, hi=hi, seed=seed)

    @classmethod
    def per_link(cls, links: Mapping[tuple[Endpoint, Endpoint], int], default: int = 0) -> "DelayModel":
        return cls(DelayKind.PER_LINK_FIXED, links=dict(links), default=default)

    @property
    def fifo(self) -> bool:
        return self.kind is not DelayKind.UNIFORM_INT or self.lo == self.hi

    def sampler(self):
        """Return a fresh ``(src, dst) -> delay`` callable with its own RNG."""
        if self.kind is DelayKind.ZERO:
            return lambda src, dst: 0
        if self.kind is DelayKind.PER_LINK_FIXED:
            links, default = dict(self.links), self.default
            return lambda src, dst: links.get((src, dst), default)
        rng = np.random.default_rng(self.seed)
        lo, hi = self.lo, self.hi
        # pre-drawn blocks keep per-message cost low; the draw sequence is unchanged
        block: list[int] = []

        def draw(src: Endpoint, dst: Endpoint) -> int:
            if not block:
                block.extend(rng.integers(lo, hi + 1, size=4096).tolist()[::-1])
            return block.pop()

        return draw


class Network:
    """Deterministic single-threaded event queue in virtual time."""

    def __init__(self, delays: Optional[DelayModel] = None, keep_trace: bool = True) -> None:
        self.delays = delays or DelayModel.zero()
        self._sample = self.delays.sampler()
        self._heap: list = []
        self._seq = 0
        self.now = 0
        self.sent = 0
        self.delivered = 0
        self.keep_trace = keep_trace
        self.trace: list[tuple[int, str, str, str, int]] = []

    def post(self, kind: MessageKind, src: Endpoint, dst: Endpoint, payload: Any) -> Message:
        return self.send(Message(kind, payload, src, dst, send_time=self.now, deliver_time=self.now))

    def send(self, msg: Message) -> Message:
        if msg.send_time != self.now:
            raise ValueError("message send_time must equal the current virtual time")
        delay = self._sample(msg.src, msg.dst)
        # copy without re-validating; msg was validated on construction
        scheduled = object.__new__(Message)
        scheduled.__dict__.update(msg.__dict__, deliver_time=self.now + delay, seq=self._seq)
        self._seq += 1
        self.sent += 1
        heapq.heappush(self._heap, (scheduled.deliver_time, scheduled.seq, scheduled))
        return scheduled

    def record(self, kind: MessageKind, src: Endpoint, dst: Endpoint, payload: Any) -> None:
        """Trace an out-of-band exchange that is handled synchronously."""
        msg = Message(kind, payload, src, dst, send_time=self.now, deliver_time=self.now, seq=self._seq)
        self._seq += 1
        if self.keep_trace:
            self.trace.append((msg.deliver_time, msg.kind.value, msg.src, msg.dst, msg.seq))

    def schedule_timer(self, owner: int, at: int) -> Timer:
        if at < self.now:
            raise ValueError("cannot schedule a timer in the past")
        timer = Timer(owner, deliver_time=at, seq=self._seq)
        self._seq += 1
        heapq.heappush(self._heap, (at, timer.seq, timer))
        return timer

    def next_event(self) -> Union[Message, Timer, None]:
        """Pop the globally minimal event, or ``None`` at end of simulation."""
        if not self._heap:
            return None
        at, seq, item = heapq.heappop(self._heap)
        self.now = at
        if isinstance(item, Message):
            self.delivered += 1
            if self.keep_trace:
                self.trace.append((at, item.kind.value, item.src, item.dst, seq))
        return item

    @property
    def pending(self) -> int:
        return len(self._heap)

    def dump_trace(self, path: Union[str, Path]) -> None:
        lines = [f"{t},{k},{s},{d},{q}\n" for t, k, s, d, q in self.trace]
        Path(path).write_text("".join(lines))


class ThreadedNetwork:
    """Real-thread transport with per-endpoint inboxes.

    Delays are sampled from the same :class:`DelayModel` and slept as
    ``delay * tick_seconds`` on a delivery thread. Payloads are frozen
    dataclasses with read-only arrays, so sharing them across threads is safe.
    """

    def __init__(self, delays: Optional[DelayModel] = None, tick_seconds: float = 1e-4) -> None:
        self.delays = delays or DelayModel.zero()
        self.tick_seconds = tick_seconds
        self._sample = self.delays.sampler()
        self._lock = threading.Lock()
        self._inboxes: dict[Endpoint, queue.Queue] = {}
        self._outbox: queue.PriorityQueue = queue.PriorityQueue()
        self._seq = 0
        self._t0 = time.monotonic()
        self._closed = threading.Event()
        self._courier = threading.Thread(target=self._deliver_loop, daemon=True)
        self._courier.start()

    @property
    def now(self) -> int:
        return int((time.monotonic() - self._t0) / self.tick_seconds)

    def register(self, endpoint: Endpoint) -> None:
        with self._lock:
            self._inboxes.setdefault(endpoint, queue.Queue())

    def post(self, kind: MessageKind, src: Endpoint, dst: Endpoint, payload: Any) -> Message:
        with self._lock:
            now = self.now
            delay = self._sample(src, dst)
            msg = Message(kind, payload, src, dst, send_time=now, deliver_time=now + delay, seq=self._seq)
            self._seq += 1
        due = self._t0 + msg.deliver_time * self.tick_seconds
        self._outbox.put((due, msg.seq, msg))
        return msg

    def send(self, msg: Message) -> Message:
        return self.post(msg.kind, msg.src, msg.dst, msg.payload)

    def recv(self, endpoint: Endpoint, timeout: Optional[float] = None) -> Message:
        """Block for the next message to ``endpoint``; raises ``queue.Empty`` on timeout."""
        return self._inboxes[endpoint].get(timeout=timeout)

    def _deliver_loop(self) -> None:
        while not self._closed.is_set():
            try:
                due, seq, msg = self._outbox.get(timeout=0.05)
            except queue.Empty:
                continue
            wait = due - time.monotonic()
            if wait > 0:
                # an earlier-due message may arrive while we sleep
                self._outbox.put((due, seq, msg))
                time.sleep(min(wait, 0.001))
                continue
            self._inboxes[msg.dst].put(msg)

    def close(self) -> None:
        self._closed.set()
        self._courier.join(timeout=1.0)
