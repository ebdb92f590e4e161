import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.kernel import Kernel
from fedsim.scaler import PodPool, PodStateError, PoolExhausted


def test_cold_then_warm():
    k = Kernel()
    pool = PodPool(k)
    pid, ready = pool.acquire()
    assert ready == pytest.approx(1.5)
    pool.release(pid, 2.0)
    pid2, ready2 = pool.acquire(3.0)
    assert pid2 == pid and ready2 == pytest.approx(3.05)
    assert (pool.cold_starts, pool.warm_starts) == (1, 1)


def test_idle_expiry_and_container_seconds():
    k = Kernel()
    pool = PodPool(k)
    pid, _ = pool.acquire()
    k.schedule(10.0, lambda: pool.release(pid))
    k.run_until_quiescent()
    assert k.now == pytest.approx(40.0)
    assert pool.live_pods == 0
    assert pool.container_seconds(100.0) == pytest.approx(40.0)
    assert pool.integrated_size(100.0) == pytest.approx(40.0)
    assert pool.busy_seconds(100.0) == pytest.approx(8.5)


def test_reuse_cancels_expiry():
    k = Kernel()
    pool = PodPool(k)
    pid, _ = pool.acquire()
    k.schedule(5.0, lambda: pool.release(pid))
    k.schedule(20.0, lambda: pool.acquire())
    k.schedule(45.0, lambda: pool.release(pid))
    k.run_until_quiescent()
    assert pool.pods[pid].removed_at == pytest.approx(75.0)
    assert len(pool.pods) == 1


def test_lifo_reuse():
    k = Kernel()
    pool = PodPool(k)
    a, _ = pool.acquire()
    b, _ = pool.acquire()
    pool.release(a)
    pool.release(b)
    assert pool.acquire()[0] == b


def test_max_pods_queues_requests():
    k = Kernel()
    pool = PodPool(k, max_pods=1)
    got = []
    pool.request(lambda p, r: got.append((p, r)))
    pool.request(lambda p, r: got.append((p, r)))
    assert len(got) == 1
    with pytest.raises(PoolExhausted):
        pool.acquire()
    k.schedule(4.0, lambda: pool.release(got[0][0]))
    k.run_until_quiescent()
    assert got[1] == (got[0][0], pytest.approx(4.05))


def test_release_errors():
    pool = PodPool(Kernel())
    with pytest.raises(PodStateError):
        pool.release(0)
    with pytest.raises(ValueError):
        PodPool(Kernel(), cold_start_seconds=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 200), st.floats(0.1, 50)), min_size=1, max_size=30))
def test_container_seconds_match_integrated_size(jobs):
    # two independent accountings of the same lifetimes must agree
    k = Kernel()
    pool = PodPool(k)

    def start(duration):
        pid, ready = pool.acquire()
        k.schedule(ready + duration, lambda: pool.release(pid))

    for at, dur in jobs:
        k.schedule(at, start, dur)
    end = k.run_until_quiescent()
    assert pool.live_pods == 0
    assert pool.container_seconds(end) == pytest.approx(pool.integrated_size(end))
    assert pool.busy_seconds(end) == pytest.approx(sum(d for _, d in jobs))
    assert 0 < pool.utilization(end) <= 1
