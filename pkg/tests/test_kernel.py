import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.kernel import Distribution, HorizonExceeded, Kernel, PastEventError, make_stream


def test_events_fire_in_time_then_sequence_order():
    k = Kernel()
    seen = []
    k.schedule(2.0, seen.append, "b")
    k.schedule(1.0, seen.append, "a")
    k.schedule(2.0, seen.append, "c")
    assert k.run_until_quiescent() == 2.0
    assert seen == ["a", "b", "c"]


@given(st.lists(st.floats(0, 1e6, allow_nan=False), max_size=60))
def test_processing_order_is_sorted_and_stable(times):
    k = Kernel()
    seen = []
    for i, t in enumerate(times):
        k.schedule(t, seen.append, (t, i))
    k.run_until_quiescent()
    assert seen == sorted(seen)


def test_cancelled_event_is_skipped():
    k = Kernel()
    seen = []
    ev = k.schedule(1.0, seen.append, 1)
    k.schedule(2.0, seen.append, 2)
    ev.cancel()
    assert k.pending() == 1
    k.run_until_quiescent()
    assert seen == [2]


def test_payloadless_target_called_without_args():
    k = Kernel()
    hits = []
    k.schedule(0.5, lambda: hits.append(k.now))
    k.run_until_quiescent()
    assert hits == [0.5]


def test_past_and_non_finite_schedules_rejected():
    k = Kernel()
    k.schedule(5.0, lambda: None)
    k.run_until_quiescent()
    with pytest.raises(PastEventError):
        k.schedule(4.0, lambda: None)
    with pytest.raises(PastEventError):
        k.schedule(float("nan"), lambda: None)


def test_horizon_exceeded():
    k = Kernel(horizon=10.0)

    def loop():
        k.schedule_in(3.0, loop)

    k.schedule(0.0, loop)
    with pytest.raises(HorizonExceeded):
        k.run_until_quiescent()
    assert k.now <= 10.0


def test_run_until_predicate():
    k = Kernel()
    count = []
    for t in range(10):
        k.schedule(float(t), count.append, t)
    k.run_until(lambda: len(count) == 4)
    assert count == [0, 1, 2, 3]
    assert k.pending() == 6


def test_streams_independent_and_reproducible():
    a1 = make_stream(7, "party-latency").random(5)
    a2 = make_stream(7, "party-latency").random(5)
    b = make_stream(7, "faults").random(5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    # drawing from one stream never shifts another
    k = Kernel(7)
    k.stream("faults").random(100)
    np.testing.assert_array_equal(k.stream("party-latency").random(5), a1)


@pytest.mark.parametrize(
    "kind,a,b",
    [("uniform", 2.0, 1.0), ("exponential", 0.0, 0.0), ("bernoulli", 1.5, 0.0), ("gamma", 1.0, 1.0)],
)
def test_distribution_validation(kind, a, b):
    with pytest.raises(ValueError):
        Distribution(kind, a, b)


@settings(max_examples=30)
@given(st.floats(0, 100), st.floats(0, 100))
def test_uniform_samples_in_range(lo, width):
    d = Distribution.uniform(lo, lo + width)
    rng = make_stream(0, "t")
    xs = [d.sample(rng) for _ in range(20)]
    assert all(lo <= x <= lo + width for x in xs)


def test_distribution_means():
    rng = make_stream(3, "m")
    for d, mean in [
        (Distribution.constant(4.0), 4.0),
        (Distribution.uniform(0, 600), 300.0),
        (Distribution.exponential(0.5), 2.0),
        (Distribution.bernoulli(0.2), 0.2),
    ]:
        assert d.mean() == pytest.approx(mean)
        xs = np.array([d.sample(rng) for _ in range(20000)])
        assert xs.mean() == pytest.approx(mean, rel=0.05)
