from __future__ import annotations

import numpy as np
import pytest

from stalesync.client import WAIT_GATE, CacheEntry, Client, ClientCache
from stalesync.core import ConsistencyConfig
from stalesync.transport import MessageKind, Network, RowSnapshot


def step(gen):
    """Advance a read generator once: ('wait', marker) or ('done', views)."""
    try:
        return "wait", next(gen)
    except StopIteration as stop:
        return "done", stop.value


def sent(net):
    out = []
    while (ev := net.next_event()) is not None:
        out.append(ev)
    return out


def client(config=None, width=2, **kw):
    net = Network()
    return net, Client(0, config or ConsistencyConfig.ssp(2), net, width, **kw)


def seed_cache(c, row, values, c_param, applied=0):
    c.cache.put(row, CacheEntry(np.asarray(values, dtype=float), c_param, applied))


def test_gate_serves_fresh_enough_cached_row():
    net, c = client(ConsistencyConfig.ssp(2))
    c.c_worker = 5
    seed_cache(c, 0, [1.0, 2.0], c_param=3)
    status, views = step(c.read((0,)))
    assert status == "done"
    np.testing.assert_array_equal(views[0], [1.0, 2.0])
    assert not sent(net)
    assert c.sample_cparam == [3] and c.sample_clock == [5]


def test_gate_blocks_and_requests_stale_row():
    net, c = client(ConsistencyConfig.ssp(2))
    c.c_worker = 5
    seed_cache(c, 0, [1.0, 2.0], c_param=2)
    gen = c.read((0,))
    assert step(gen) == ("wait", WAIT_GATE)
    reqs = sent(net)
    assert [m.kind for m in reqs] == [MessageKind.READ_REQUEST]
    assert reqs[0].payload.min_c_param == 3
    # a reply that satisfies the gate releases the read
    c._install(RowSnapshot(0, np.array([7.0, 7.0]), 3, 4))
    c._outstanding.clear()
    status, views = step(gen)
    assert status == "done"
    np.testing.assert_array_equal(views[0], [7.0, 7.0])


def test_outstanding_request_not_duplicated():
    net, c = client()
    gen = c.read((0,))
    step(gen)
    step(gen)
    assert len(sent(net)) == 1


def test_inc_coalesces_and_checks_width():
    net, c = client()
    c.inc(3, [1.0, 0.0])
    c.inc(3, [0.5, 1.0])
    np.testing.assert_array_equal(c.local_updates[3], [1.5, 1.0])
    with pytest.raises(ValueError):
        c.inc(3, [1.0])


def test_clock_sends_one_batch_and_tick_per_shard():
    net, c = client(n_shards=2)
    c.inc(0, [1.0, 1.0])
    c.inc(3, [2.0, 2.0])
    c.inc(1, [3.0, 3.0])
    c.clock()
    msgs = sent(net)
    kinds = [(m.kind, m.dst) for m in msgs]
    assert kinds == [
        (MessageKind.INC_BATCH, "s0"),
        (MessageKind.INC_BATCH, "s1"),
        (MessageKind.CLOCK_TICK, "s0"),
        (MessageKind.CLOCK_TICK, "s1"),
    ]
    assert [r for r, _ in msgs[1].payload.entries] == [1, 3]
    assert c.c_worker == 1 and c.local_updates == {}


def test_read_my_writes_view_includes_buffer():
    net, c = client()
    seed_cache(c, 0, [1.0, 1.0], c_param=0)
    c.inc(0, [0.5, 0.0])
    _, views = step(c.read((0,)))
    np.testing.assert_array_equal(views[0], [1.5, 1.0])
    net2, c2 = client(ConsistencyConfig.ssp(2, read_my_writes=False))
    seed_cache(c2, 0, [1.0, 1.0], c_param=0)
    c2.inc(0, [0.5, 0.0])
    _, views = step(c2.read((0,)))
    np.testing.assert_array_equal(views[0], [1.0, 1.0])


def test_apply_push_replaces_newer_and_drops_stale():
    net, c = client(ConsistencyConfig.essp(1))
    seed_cache(c, 0, [0.0, 0.0], c_param=3)
    assert c.apply_push(0, [5.0, 5.0], 5)
    assert c.cache.peek(0).c_param == 5
    assert not c.apply_push(0, [9.0, 9.0], 3)
    np.testing.assert_array_equal(c.cache.peek(0).values, [5.0, 5.0])
    assert c.stale_drops == 1
    assert c.apply_push(7, [1.0, 1.0], 0)  # uncached row is inserted
    assert 7 in c.cache


def test_replacement_replays_unacknowledged_own_batches():
    net, c = client(ConsistencyConfig.essp(3))
    seed_cache(c, 0, [0.0, 0.0], c_param=0)
    c.inc(0, [1.0, 0.0])
    c.clock()
    np.testing.assert_array_equal(c.cache.peek(0).values, [1.0, 0.0])
    # server snapshot that does not contain our clock-0 batch yet
    c._install(RowSnapshot(0, np.array([10.0, 10.0]), 0, 1, own_watermark=0))
    np.testing.assert_array_equal(c.cache.peek(0).values, [11.0, 10.0])
    # one that does: the batch is acknowledged and not replayed again
    c._install(RowSnapshot(0, np.array([11.0, 10.0]), 1, 2, own_watermark=1))
    np.testing.assert_array_equal(c.cache.peek(0).values, [11.0, 10.0])
    assert c._unacked[0] == {}


def test_lru_eviction_order_and_capacity():
    cache = ClientCache(2)
    for r in range(3):
        cache.put(r, CacheEntry(np.zeros(1), 0, 0))
    assert cache.lru_order == [1, 2]
    cache.touch(1)
    cache.put(5, CacheEntry(np.zeros(1), 0, 0))
    assert cache.lru_order == [1, 5]
    assert cache.evictions == 2
    with pytest.raises(ValueError):
        ClientCache(0)


def test_eviction_spares_rows_with_pending_updates():
    net, c = client(capacity=1)
    seed_cache(c, 0, [0.0, 0.0], c_param=0)
    c.inc(0, [1.0, 1.0])
    c.apply_push(1, [2.0, 2.0], 0)
    assert 0 in c.cache and 1 in c.cache  # protected row may exceed capacity
    c.clock()
    assert c.evict_lru() == [0]
    assert len(c.cache) == 1


def test_callback_mode_skips_request_for_registered_row():
    net, c = client(ConsistencyConfig.essp(0))
    seed_cache(c, 0, [0.0, 0.0], c_param=0)
    c._registered.add(0)
    c.c_worker = 2
    gen = c.read((0,))
    assert step(gen) == ("wait", WAIT_GATE)
    assert not sent(net)  # a push will bring the row
