"""Deterministic discrete-event kernel.

Everything in the simulator runs on one virtual clock driven by a binary
heap of ``(fire_at, sequence)``-ordered events.  Concurrency in the modelled
system (parties, aggregator functions, pods) is expressed as interleaved
events, never as threads, so every run is replayable bit for bit.

Randomness comes from named streams: each concern (party think times,
faults, task generation, ...) draws from its own generator, so adding a draw
in one place never shifts the numbers seen anywhere else.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

DEFAULT_HORIZON = 1e7


class SimulationError(RuntimeError):
    """Base class for kernel-level failures."""


class PastEventError(SimulationError):
    """An event was scheduled before the current virtual time."""


class HorizonExceeded(SimulationError):
    """The run kept producing events past the configured horizon."""


@dataclass(order=True)
class Event:
    fire_at: float
    sequence: int
    target: Callable[..., Any] = field(compare=False)
    payload: Any = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


class Kernel:
    """Single-threaded event loop with a virtual clock.

    Args:
        seed: root seed for every named RNG stream.
        horizon: largest virtual time the loop may reach before it gives up.
    """

    def __init__(self, seed: int = 0, horizon: float = DEFAULT_HORIZON) -> None:
        self.seed = int(seed)
        self.horizon = float(horizon)
        self._now = 0.0
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = itertools.count()
        self._streams: dict[str, np.random.Generator] = {}
        self.processed = 0

    @property
    def now(self) -> float:
        return self._now

    def schedule(self, fire_at: float, target: Callable[..., Any], payload: Any = None) -> Event:
        """Enqueue ``target(payload)`` to run at ``fire_at``; returns a cancellable handle."""
        if not math.isfinite(fire_at):
            raise PastEventError(f"non-finite fire time {fire_at!r}")
        if fire_at < self._now:
            raise PastEventError(f"cannot schedule at t={fire_at} while clock is {self._now}")
        event = Event(float(fire_at), next(self._seq), target, payload)
        heapq.heappush(self._queue, (event.fire_at, event.sequence, event))
        return event

    def schedule_in(self, delay: float, target: Callable[..., Any], payload: Any = None) -> Event:
        return self.schedule(self._now + delay, target, payload)

    def pending(self) -> int:
        return sum(not e.cancelled for _, _, e in self._queue)

    def step(self) -> bool:
        """Process one live event; returns False when the queue is empty."""
        while self._queue:
            event = heapq.heappop(self._queue)[2]
            if event.cancelled:
                continue
            if event.fire_at > self.horizon:
                raise HorizonExceeded(
                    f"event at t={event.fire_at} beyond horizon {self.horizon}"
                )
            self._now = event.fire_at
            self.processed += 1
            if event.payload is None:
                event.target()
            else:
                event.target(event.payload)
            return True
        return False

    def run_until_quiescent(self) -> float:
        """Drain the queue in ``(fire_at, sequence)`` order and return the final clock."""
        while self.step():
            pass
        return self._now

    def run_until(self, predicate: Callable[[], bool]) -> float:
        """Process events until ``predicate()`` holds or the queue drains."""
        while not predicate():
            if not self.step():
                break
        return self._now

    # -- randomness -------------------------------------------------------

    def stream(self, stream_id: str) -> np.random.Generator:
        """Generator for a named stream, created lazily and cached."""
        gen = self._streams.get(stream_id)
        if gen is None:
            gen = make_stream(self.seed, stream_id)
            self._streams[stream_id] = gen
        return gen

    def draw(self, stream_id: str, dist: "Distribution") -> float:
        return dist.sample(self.stream(stream_id))


def _stream_key(stream_id: str) -> int:
    return int.from_bytes(hashlib.sha256(stream_id.encode()).digest()[:8], "little")


def make_stream(seed: int, stream_id: str, *extra: int) -> np.random.Generator:
    """Platform-stable generator for ``(seed, stream_id, *extra)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _stream_key(stream_id), *map(int, extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class Distribution:
    """A one-dimensional sampling distribution.

    ``kind`` is one of ``constant``, ``uniform``, ``exponential``,
    ``bernoulli``; parameters are validated on construction.
    """

    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "constant":
            if not math.isfinite(self.a):
                raise ValueError("constant value must be finite")
        elif self.kind == "uniform":
            if not (math.isfinite(self.a) and math.isfinite(self.b)) or self.b < self.a:
                raise ValueError(f"uniform needs finite low <= high, got ({self.a}, {self.b})")
        elif self.kind == "exponential":
            if not self.a > 0 or not math.isfinite(self.a):
                raise ValueError(f"exponential rate must be positive, got {self.a}")
        elif self.kind == "bernoulli":
            if not 0.0 <= self.a <= 1.0:
                raise ValueError(f"bernoulli p must lie in [0, 1], got {self.a}")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> Distribution:
        return cls("constant", float(value))

    @classmethod
    def uniform(cls, low: float, high: float) -> Distribution:
        return cls("uniform", float(low), float(high))

    @classmethod
    def exponential(cls, rate: float) -> Distribution:
        return cls("exponential", float(rate))

    @classmethod
    def bernoulli(cls, p: float) -> Distribution:
        return cls("bernoulli", float(p))

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.kind == "exponential":
            return float(rng.exponential(1.0 / self.a))
        return 1.0 if rng.random() < self.a else 0.0

    def mean(self) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        if self.kind == "exponential":
            return 1.0 / self.a
        return self.a
