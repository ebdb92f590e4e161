"""Round bookkeeping shared by the three aggregation backends.

A backend receives party updates through :meth:`Backend.submit`, decides
when the round closes according to a :class:`RoundPolicy`, fuses the accepted
updates however its architecture dictates, and hands the next global model
to ``on_model``.  Updates that arrive after the round closed are counted and
dropped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .fusion import GlobalModel, ModelUpdate
from .kernel import Kernel

log = logging.getLogger(__name__)


class RoundFailed(RuntimeError):
    """The round closed without quorum under a fail-on-no-quorum policy."""


@dataclass(frozen=True)
class RoundPolicy:
    """When a round stops accepting updates.

    The round closes once ``ceil(quorum_fraction * expected)`` updates have
    arrived and ``min_wait_seconds`` have elapsed, or unconditionally at
    ``response_timeout_seconds``.  Without quorum at the timeout the round
    aggregates whatever arrived, unless ``fail_on_no_quorum`` is set.
    """

    quorum_fraction: float = 1.0
    response_timeout_seconds: float = 600.0
    min_wait_seconds: float = 0.0
    fail_on_no_quorum: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.quorum_fraction <= 1:
            raise ValueError("quorum_fraction must lie in (0, 1]")
        if not self.response_timeout_seconds > 0:
            raise ValueError("response_timeout_seconds must be positive")
        if self.min_wait_seconds < 0:
            raise ValueError("min_wait_seconds must be non-negative")

    def quorum(self, expected: int) -> int:
        return quorum_count(self.quorum_fraction, expected)

    def should_close(self, arrived: int, expected: int, opened_at: float, clock: float) -> bool:
        if clock >= opened_at + self.response_timeout_seconds:
            return True
        return arrived >= self.quorum(expected) and clock >= opened_at + self.min_wait_seconds

    def deadlines(self, opened_at: float) -> list[float]:
        out = [opened_at + self.response_timeout_seconds]
        if self.min_wait_seconds > 0:
            out.append(opened_at + self.min_wait_seconds)
        return out


def quorum_count(fraction: float, expected: int) -> int:
    # guard against 0.1 * 30 == 3.0000000000000004
    return math.ceil(fraction * expected - 1e-9)


@dataclass
class RoundRecord:
    round: int
    opened_at: float
    expected: set[int] = field(default_factory=set)
    arrivals: dict[str, ModelUpdate] = field(default_factory=dict)
    closed_at: float | None = None
    accepted: frozenset[str] = frozenset()
    published_at: float | None = None
    discarded_late: int = 0
    invocations: int = 0
    crashes: int = 0
    reconfig_events: int = 0
    reconfig_delay: float = 0.0
    root_contributors: int = 0
    empty: bool = False

    @property
    def closed(self) -> bool:
        return self.closed_at is not None

    @property
    def complete(self) -> bool:
        return self.published_at is not None

    @property
    def last_accepted_at(self) -> float:
        times = [self.arrivals[u].submitted_at for u in self.accepted]
        return max(times) if times else self.closed_at or self.opened_at

    def accepted_updates(self) -> list[ModelUpdate]:
        return [self.arrivals[u] for u in sorted(self.accepted)]


def aggregation_latency(record: RoundRecord) -> float:
    """Seconds from the last accepted update to publication of the fused model."""
    if record.published_at is None:
        raise ValueError(f"round {record.round} has not completed")
    if record.empty:
        return 0.0
    return max(0.0, record.published_at - record.last_accepted_at)


@dataclass(frozen=True)
class ResourceUsage:
    container_seconds: float
    busy_seconds: float
    nodes: int

    @property
    def utilization(self) -> float:
        return self.busy_seconds / self.container_seconds if self.container_seconds > 0 else 0.0


class Backend:
    """Common round lifecycle.  Subclasses implement the fusion pipeline.

    Subclasses must call :meth:`_publish_model` exactly once per round and
    may override :meth:`_on_arrival` / :meth:`_on_close`.
    """

    name = "base"
    admits_joiners_mid_round = True

    def __init__(
        self,
        kernel: Kernel,
        policy: RoundPolicy,
        on_model: Callable[[GlobalModel, RoundRecord], None],
    ) -> None:
        self.kernel = kernel
        self.policy = policy
        self.on_model = on_model
        self.records: dict[int, RoundRecord] = {}
        self.current: RoundRecord | None = None
        self.model: GlobalModel | None = None
        self._deadline_events: list = []

    # -- lifecycle hooks for the driver ---------------------------------------

    def open_round(self, model: GlobalModel, expected: Iterable[int]) -> None:
        rec = RoundRecord(model.round, self.kernel.now, set(expected))
        self.records[model.round] = rec
        self.current = rec
        self.model = model
        self._on_open(rec)
        for t in self.policy.deadlines(rec.opened_at):
            self._deadline_events.append(self.kernel.schedule(t, self._deadline, rec.round))
        self._check_close()

    def submit(self, update: ModelUpdate) -> None:
        rec = self.records.get(update.round)
        if rec is None:
            raise ValueError(f"update for unknown round {update.round}")
        if rec.closed:
            rec.discarded_late += 1
            log.debug("late update %s discarded", update.update_id)
            self._on_late(update)
            return
        rec.arrivals[update.update_id] = update
        self._on_arrival(rec, update)
        self._check_close()

    def admit(self, party_ids: Iterable[int]) -> None:
        """Grow the expected set of the open round (mid-round joins)."""
        if self.current is not None and not self.current.closed:
            self.current.expected.update(party_ids)

    def join(self, party_ids: Iterable[int]) -> None:
        """Parties announced a join mid-round; default is to admit them now."""
        self.admit(party_ids)

    def stop(self) -> None:
        for ev in self._deadline_events:
            ev.cancel()
        self._deadline_events.clear()

    def usage(self, end: float) -> ResourceUsage:
        raise NotImplementedError

    # -- internals -----------------------------------------------------------

    def _deadline(self, round_no: int) -> None:
        if self.current is not None and self.current.round == round_no:
            self._check_close()

    def _check_close(self) -> None:
        rec = self.current
        if rec is None or rec.closed:
            return
        if self.policy.should_close(len(rec.arrivals), len(rec.expected), rec.opened_at, self.kernel.now):
            self._close(rec)

    def _close(self, rec: RoundRecord) -> None:
        need = self.policy.quorum(len(rec.expected))
        if len(rec.arrivals) < need and self.policy.fail_on_no_quorum:
            raise RoundFailed(
                f"round {rec.round}: {len(rec.arrivals)} of {len(rec.expected)} responded, quorum {need}"
            )
        rec.closed_at = self.kernel.now
        rec.accepted = frozenset(rec.arrivals)
        if len(rec.arrivals) < len(rec.expected):
            log.info(
                "round %d closed with %d/%d updates", rec.round, len(rec.arrivals), len(rec.expected)
            )
        if not rec.accepted:
            rec.empty = True
            self._publish_model(GlobalModel(rec.round + 1, self.model.weights, self.model.learning_rate), rec)
            return
        self._on_close(rec)

    def _publish_model(self, model: GlobalModel, rec: RoundRecord) -> None:
        if rec.published_at is not None:
            raise RuntimeError(f"round {rec.round} published twice")
        rec.published_at = self.kernel.now
        self.model = model
        if self.current is rec:
            self.current = None
        self.on_model(model, rec)

    def _on_open(self, rec: RoundRecord) -> None:
        pass

    def _on_arrival(self, rec: RoundRecord, update: ModelUpdate) -> None:
        pass

    def _on_late(self, update: ModelUpdate) -> None:
        pass

    def _on_close(self, rec: RoundRecord) -> None:
        raise NotImplementedError
