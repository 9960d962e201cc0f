import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockemu.netqueue import EmptyQueue, EventKind, EventQueue, LatencyModel, broadcast, sample_latency


def test_empty_queue():
    q = EventQueue()
    assert not q and len(q) == 0
    with pytest.raises(EmptyQueue):
        q.pop_earliest()
    with pytest.raises(EmptyQueue):
        q.peek()


def test_fifo_within_equal_timestamps():
    q = EventQueue()
    for target in range(5):
        q.push(10.0, EventKind.VOTE_ARRIVAL, target)
    q.push(5.0, EventKind.BLOCK_ARRIVAL, 99)
    assert q.peek().target == 99
    assert [q.pop_earliest().target for _ in range(6)] == [99, 0, 1, 2, 3, 4]


@given(st.lists(st.tuples(st.integers(0, 20), st.sampled_from(list(EventKind))), max_size=200))
def test_total_order_and_conservation(items):
    q = EventQueue()
    for ts, kind in items:
        q.push(float(ts), kind, 0)
    out = [q.pop_earliest() for _ in range(len(q))]
    keys = [(e.timestamp, e.seq) for e in out]
    assert keys == sorted(keys)
    assert q.pushed == q.popped == len(items)
    # same-timestamp events keep push order
    for a, b in zip(out, out[1:]):
        if a.timestamp == b.timestamp:
            assert a.seq < b.seq


def test_latency_model_defaults_and_floor():
    m = LatencyModel()
    assert (m.mean_ms, m.stddev_ms, m.floor_ms) == (100.0, 20.0, 1.0)
    rng = random.Random(0)
    xs = [m.sample(rng) for _ in range(5000)]
    assert abs(sum(xs) / len(xs) - 100.0) < 2.0
    wide = LatencyModel(5.0, 50.0, 1.0)
    assert min(wide.sample(rng) for _ in range(2000)) == 1.0
    assert LatencyModel(100.0, 0.0).sample(rng) == 100.0
    assert sample_latency(LatencyModel(0.5, 0.0, 2.0), rng) == 2.0
    with pytest.raises(ValueError):
        LatencyModel(floor_ms=0)
    with pytest.raises(ValueError):
        LatencyModel(stddev_ms=-1)


def test_broadcast_counts_and_independent_delays():
    q = EventQueue()
    rng = random.Random(1)
    assert broadcast(q, 2, EventKind.BLOCK_ARRIVAL, "b", range(5), LatencyModel(), rng, 50.0) == 4
    evs = [q.pop_earliest() for _ in range(4)]
    assert sorted(e.target for e in evs) == [0, 1, 3, 4]
    assert len({e.timestamp for e in evs}) == 4
    assert all(e.timestamp > 50.0 for e in evs)
    assert broadcast(q, 0, EventKind.BLOCK_ARRIVAL, "b", range(1), LatencyModel(), rng, 0.0) == 0
