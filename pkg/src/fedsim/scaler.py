"""Elastic pod pool for serverless aggregation functions.

Pods are provisioned on demand (cold start), reused while idle (warm start)
and torn down after ``idle_timeout`` seconds without work.  Every pod's
lifetime is recorded so container-seconds can be audited after the run.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .kernel import Kernel

DEFAULT_COLD_START = 1.5
DEFAULT_WARM_START = 0.05
DEFAULT_IDLE_TIMEOUT = 30.0


class PodState(str, enum.Enum):
    PROVISIONING = "provisioning"
    IDLE = "idle"
    BUSY = "busy"


class PoolExhausted(RuntimeError):
    """No idle pod and ``max_pods`` already provisioned."""


class PodStateError(RuntimeError):
    pass


@dataclass
class Pod:
    pod_id: int
    provisioned_at: float
    state: PodState = PodState.PROVISIONING
    ready_at: float = 0.0
    last_released_at: float | None = None
    removed_at: float | None = None
    busy_seconds: float = 0.0
    acquisitions: int = 0
    _release_token: int = field(default=0, repr=False)

    def alive_seconds(self, end: float) -> float:
        stop = self.removed_at if self.removed_at is not None else end
        return max(0.0, min(stop, end) - self.provisioned_at)


class PodPool:
    """Warm/cold pod acquisition with idle-timeout scale-down.

    Args:
        kernel: drives idle expiry events.
        cold_start_seconds: delay to provision a fresh pod.
        warm_start_seconds: delay to start a function on an idle pod.
        idle_timeout_seconds: idle pods older than this are removed.
        max_pods: cap on concurrently provisioned pods; ``None`` is unbounded.
    """

    def __init__(
        self,
        kernel: Kernel,
        cold_start_seconds: float = DEFAULT_COLD_START,
        warm_start_seconds: float = DEFAULT_WARM_START,
        idle_timeout_seconds: float = DEFAULT_IDLE_TIMEOUT,
        max_pods: int | None = None,
    ) -> None:
        if not cold_start_seconds > 0 or warm_start_seconds < 0 or not idle_timeout_seconds > 0:
            raise ValueError("cold start and idle timeout must be positive, warm start non-negative")
        if max_pods is not None and max_pods < 1:
            raise ValueError("max_pods must be >= 1")
        self.kernel = kernel
        self.cold_start_seconds = cold_start_seconds
        self.warm_start_seconds = warm_start_seconds
        self.idle_timeout_seconds = idle_timeout_seconds
        self.max_pods = max_pods
        self.pods: dict[int, Pod] = {}
        self._idle: dict[int, None] = {}  # popitem() is LIFO: most recently released first
        self._waiting: deque[Callable[[int, float], None]] = deque()
        self._next_id = 0
        self._live = 0
        self.cold_starts = 0
        self.warm_starts = 0
        # (time, live pod count) after every change, for auditing
        self.size_history: list[tuple[float, int]] = [(0.0, 0)]

    @property
    def live_pods(self) -> int:
        return self._live

    def _note_size(self) -> None:
        self.size_history.append((self.kernel.now, self.live_pods))

    def acquire(self, clock: float | None = None) -> tuple[int, float]:
        """Take a pod now; returns ``(pod_id, ready_at)``.

        Raises :class:`PoolExhausted` when the cap is reached and nothing is idle.
        """
        now = self.kernel.now if clock is None else clock
        if self._idle:
            pod = self.pods[self._idle.popitem()[0]]
            pod.ready_at = now + self.warm_start_seconds
            self.warm_starts += 1
        else:
            if self.max_pods is not None and self.live_pods >= self.max_pods:
                raise PoolExhausted(f"all {self.max_pods} pods busy")
            pod = Pod(self._next_id, provisioned_at=now)
            self._next_id += 1
            self.pods[pod.pod_id] = pod
            self._live += 1
            pod.ready_at = now + self.cold_start_seconds
            self.cold_starts += 1
            self._note_size()
        pod.state = PodState.BUSY
        pod.acquisitions += 1
        pod._release_token += 1
        return pod.pod_id, pod.ready_at

    def request(self, callback: Callable[[int, float], None]) -> None:
        """Acquire now if possible, otherwise queue ``callback`` until a release."""
        try:
            pod_id, ready_at = self.acquire()
        except PoolExhausted:
            self._waiting.append(callback)
            return
        callback(pod_id, ready_at)

    def release(self, pod_id: int, clock: float | None = None) -> None:
        now = self.kernel.now if clock is None else clock
        pod = self.pods.get(pod_id)
        if pod is None or pod.state is not PodState.BUSY:
            raise PodStateError(f"pod {pod_id} is not busy")
        pod.busy_seconds += max(0.0, now - pod.ready_at)
        pod.state = PodState.IDLE
        pod.last_released_at = now
        pod._release_token += 1
        if self._waiting:
            callback = self._waiting.popleft()
            self._idle[pod_id] = None
            pod_id2, ready_at = self.acquire(now)
            callback(pod_id2, ready_at)
            return
        self._idle[pod_id] = None
        self.kernel.schedule(now + self.idle_timeout_seconds, self._expire, (pod_id, pod._release_token))

    def _expire(self, item: tuple[int, int]) -> None:
        pod_id, token = item
        pod = self.pods[pod_id]
        if pod.state is PodState.IDLE and pod._release_token == token and pod.removed_at is None:
            pod.removed_at = self.kernel.now
            self._live -= 1
            del self._idle[pod_id]
            self._note_size()

    def container_seconds(self, end: float) -> float:
        """Sum over pods of ``min(removal, end) - provisioned_at``."""
        return math.fsum(p.alive_seconds(end) for p in self.pods.values())

    def busy_seconds(self, end: float) -> float:
        total = 0.0
        for p in self.pods.values():
            total += p.busy_seconds
            if p.state is PodState.BUSY and end > p.ready_at:
                total += end - p.ready_at
        return total

    def utilization(self, end: float) -> float:
        alive = self.container_seconds(end)
        return self.busy_seconds(end) / alive if alive > 0 else 0.0

    def integrated_size(self, end: float) -> float:
        """Integral of the live pod count over ``[0, end]`` from ``size_history``."""
        total = 0.0
        for (t0, n), (t1, _) in zip(self.size_history, self.size_history[1:] + [(end, 0)]):
            lo, hi = min(t0, end), min(t1, end)
            total += n * max(0.0, hi - lo)
        return total
