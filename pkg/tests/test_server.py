from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stalesync.core import ConsistencyConfig
from stalesync.server import Admission, ProtocolError, ServerShard, VapCoordinator, shard_of
from stalesync.transport import IncBatch, MessageKind, Network, ReadRequest


def make(config, n_workers=2, width=2, rows=None):
    net = Network()
    shard = ServerShard(0, n_workers, config, net, width, rows or {})
    return net, shard


def drain(net):
    out = []
    while (ev := net.next_event()) is not None:
        out.append(ev)
    return out


def finish_clock(shard, worker, clock, entries=()):
    shard.handle_inc_batch(IncBatch(worker, clock, list(entries)))
    shard.handle_clock_tick(worker, clock)


def test_shard_of():
    assert shard_of(7, 3) == 1


def test_table_clock_is_min_completed_and_needs_batch_and_tick():
    net, shard = make(ConsistencyConfig.ssp(1))
    shard.handle_clock_tick(0, 0)
    assert shard.completed == (0, 0)  # tick without its batch does not count
    shard.handle_inc_batch(IncBatch(0, 0, []))
    assert shard.completed == (1, 0)
    assert shard.table_clock == 0
    finish_clock(shard, 1, 0)
    assert shard.table_clock == 1
    assert shard.pending_ticks == 0


def test_early_tick_is_buffered():
    net, shard = make(ConsistencyConfig.ssp(3))
    shard.handle_clock_tick(0, 1)
    shard.handle_clock_tick(0, 0)
    shard.handle_inc_batch(IncBatch(0, 1, []))
    assert shard.completed[0] == 0
    shard.handle_inc_batch(IncBatch(0, 0, []))
    assert shard.completed[0] == 2


def test_rows_stamped_with_table_clock():
    net, shard = make(ConsistencyConfig.ssp(0), rows={0: np.zeros(2)})
    finish_clock(shard, 0, 0, [(0, np.ones(2))])
    finish_clock(shard, 1, 0)
    assert shard.rows[0].c_param == 1
    np.testing.assert_array_equal(shard.rows[0].values, [1.0, 1.0])
    snap = shard.snapshot(0, "c0")
    assert (snap.c_param, snap.applied) == (1, 2)


def test_duplicates_and_width_mismatch_rejected():
    net, shard = make(ConsistencyConfig.ssp(0))
    shard.handle_clock_tick(0, 0)
    with pytest.raises(ProtocolError):
        shard.handle_clock_tick(0, 0)
    shard.handle_inc_batch(IncBatch(0, 0, []))
    with pytest.raises(ProtocolError):
        shard.handle_inc_batch(IncBatch(0, 0, []))
    with pytest.raises(ProtocolError):
        shard.handle_inc_batch(IncBatch(1, 0, [(0, np.ones(3))]))


def test_never_written_row_reads_zeros():
    net, shard = make(ConsistencyConfig.ssp(0))
    snap = shard.handle_read_request("c0", ReadRequest(0, 0, 9, 0))
    np.testing.assert_array_equal(snap.values, [0.0, 0.0])
    assert snap.c_param == 0


def test_ssp_read_parked_until_table_clock_suffices():
    net, shard = make(ConsistencyConfig.ssp(0))
    assert shard.handle_read_request("c0", ReadRequest(0, 1, 0, 1)) is None
    finish_clock(shard, 0, 0)
    assert not [e for e in drain(net) if e.kind is MessageKind.READ_REPLY]
    finish_clock(shard, 1, 0)
    replies = [e for e in drain(net) if e.kind is MessageKind.READ_REPLY]
    assert len(replies) == 1 and replies[0].payload.c_param == 1


def test_essp_pushes_every_registered_pair_in_sorted_order():
    net, shard = make(ConsistencyConfig.essp(2), rows={r: np.zeros(2) for r in range(3)})
    for client, w in (("c1", 1), ("c0", 0)):
        for row in (2, 0, 1):
            shard.handle_read_request(client, ReadRequest(w, 0, row, 0))
    drain(net)
    finish_clock(shard, 0, 0)
    finish_clock(shard, 1, 0)
    pushes = [e for e in drain(net) if e.kind is MessageKind.PUSH_ROW]
    assert len(pushes) == 6
    assert [(e.payload.row, e.dst) for e in pushes] == [
        (0, "c0"), (0, "c1"), (1, "c0"), (1, "c1"), (2, "c0"), (2, "c1")
    ]
    assert all(e.payload.c_param == 1 for e in pushes)


def test_ssp_callback_registration_is_noop():
    net, shard = make(ConsistencyConfig.ssp(2), rows={0: np.zeros(2)})
    shard.register_callback("c0", 0)
    assert shard.callback_noops == 1 and not shard.callbacks
    finish_clock(shard, 0, 0)
    finish_clock(shard, 1, 0)
    assert not [e for e in drain(net) if e.kind is MessageKind.PUSH_ROW]


def test_own_watermark_tracks_contiguous_applied_clocks():
    net, shard = make(ConsistencyConfig.ssp(5), n_workers=1)
    shard.handle_inc_batch(IncBatch(0, 1, []))
    snap = shard.snapshot(0, "c0")
    assert snap.own_watermark == 0 and snap.own_above == frozenset({1})
    shard.handle_inc_batch(IncBatch(0, 0, []))
    snap = shard.snapshot(0, "c0")
    assert snap.own_watermark == 2 and snap.own_above == frozenset()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=2), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_applied_sum_independent_of_arrival_order(deltas, rnd):
    n = len(deltas)
    order = list(range(n))
    rnd.shuffle(order)
    net, shard = make(ConsistencyConfig.ssp(100), n_workers=n, rows={0: np.zeros(2)})
    for w in order:
        shard.handle_inc_batch(IncBatch(w, 0, [(0, np.array(deltas[w]))]))
    np.testing.assert_allclose(shard.rows[0].values, np.sum(deltas, axis=0), atol=1e-12)


class _FakeCache:
    def __init__(self):
        self.entries = {}

    def peek(self, row):
        return self.entries.get(row)


class _FakeClient:
    def __init__(self):
        self.cache = _FakeCache()


class _Entry:
    def __init__(self, applied):
        self.applied = applied


def test_vap_coordinator_admission_and_visibility():
    coord = VapCoordinator(2, v0=1.0)
    clients = [_FakeClient(), _FakeClient()]
    coord.attach(clients)
    assert coord.vap_admit(1, (0,)) is Admission.ADMIT
    coord.on_generated(0, 0, 0, np.array([2.0]))
    # producer sees its own write; the other worker does not
    assert coord.vap_admit(0, (0,)) is Admission.ADMIT
    assert coord.vap_admit(1, (0,)) is Admission.DEFER
    assert list(coord.unseen(1, (0,))[0]) == [2.0]
    coord.on_applied(0, arrival=0, worker=0, clock=0)
    clients[1].cache.entries[0] = _Entry(applied=0)  # cached before the arrival
    assert coord.vap_admit(1, (0,)) is Admission.DEFER
    clients[1].cache.entries[0] = _Entry(applied=1)
    assert coord.vap_admit(1, (0,)) is Admission.ADMIT
    coord.prune()
    assert coord.in_transit == {}


def test_vap_threshold_shrinks_with_admissions():
    coord = VapCoordinator(1, v0=4.0)
    assert coord.threshold() == 4.0
    assert coord.admitted() == 1
    assert coord.threshold() == pytest.approx(4.0 / np.sqrt(2))


def test_vap_defer_queue_is_fifo_and_deduplicated():
    coord = VapCoordinator(3, v0=1.0)
    coord.attach([_FakeClient() for _ in range(3)])
    coord.defer(2, (0,))
    coord.defer(1, (0,))
    coord.defer(2, (0,))
    assert [w for w, _ in coord.deferred] == [2, 1]
    assert coord.pop_admissible() == 2
    assert coord.pop_admissible() == 1
    assert coord.pop_admissible() is None


def test_disabled_coordinator_always_admits():
    coord = VapCoordinator(2, v0=1e-9, enabled=False)
    coord.attach([_FakeClient(), _FakeClient()])
    coord.on_generated(0, 0, 0, np.array([1e9]))
    assert coord.vap_admit(1, (0,)) is Admission.ADMIT
