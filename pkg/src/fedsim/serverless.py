"""Queue-triggered aggregation with short-lived functions.

Parties publish updates to ``<job>-Parties``.  A trigger looks at the
unclaimed messages and decides how many leaf functions (over raw updates)
and intermediate functions (over partial aggregates) to start.  Each
function claims its inputs, runs on a pod from the pool, publishes one
partial aggregate back to the same topic and acks.  Repeated merging builds
a logical tree on the fly.  Once the round is closed and one partial covers
every accepted update, a finalizer publishes the next global model to
``<job>-Agg``.

A crashed function releases its claims and produces nothing; the next
trigger evaluation simply starts a replacement.  Publishing the output and
acking the inputs happen inside one kernel event, so no message is ever
both re-delivered and already merged.
"""

from __future__ import annotations

import enum
import importlib
import logging
from dataclasses import dataclass, field
from typing import Callable

from .backend import Backend, ResourceUsage, RoundPolicy, RoundRecord, aggregation_latency, quorum_count
from .broker import AGGREGATOR, PARTY, Broker, MessageFilter, QueuedMessage
from .fusion import GlobalModel, ModelUpdate, PartialAggregate, finalize, leaf_aggregate, merge_all
from .kernel import Distribution, Kernel
from .scaler import PodPool
from .topologies import ContainerSpec

__all__ = [
    "Action",
    "Batch",
    "BrokerView",
    "Decision",
    "Invocation",
    "InvocationRole",
    "ServerlessBackend",
    "TriggerKind",
    "TriggerSpec",
    "aggregation_latency",
    "detect_round_complete",
    "evaluate_trigger",
    "run_round_serverless",
]

log = logging.getLogger(__name__)

UPDATE = "update"
PARTIAL = "partial"


class TriggerKind(str, enum.Enum):
    EVERY_K = "every_k_updates"
    EVERY_T = "every_t_seconds"
    QUORUM = "quorum"
    CUSTOM = "custom"


@dataclass(frozen=True)
class TriggerSpec:
    """When aggregation functions are started.

    ``predicate`` (custom triggers only) is called as ``predicate(view, clock)``
    and returns True to flush every unclaimed update.
    """

    kind: TriggerKind = TriggerKind.EVERY_K
    k: int = 10
    t: float = 60.0
    fraction: float = 0.5
    max_wait_seconds: float = 600.0
    predicate: Callable[["BrokerView", float], bool] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TriggerKind(self.kind))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.t > 0:
            raise ValueError("t must be positive")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if not self.max_wait_seconds > 0:
            raise ValueError("max_wait_seconds must be positive")
        if self.kind is TriggerKind.CUSTOM and self.predicate is None:
            raise ValueError("custom trigger needs a predicate")

    @classmethod
    def every_k(cls, k: int) -> TriggerSpec:
        return cls(TriggerKind.EVERY_K, k=k)

    @classmethod
    def every_t(cls, t: float) -> TriggerSpec:
        return cls(TriggerKind.EVERY_T, t=t)

    @classmethod
    def quorum(cls, fraction: float, max_wait_seconds: float) -> TriggerSpec:
        return cls(TriggerKind.QUORUM, fraction=fraction, max_wait_seconds=max_wait_seconds)

    @classmethod
    def custom(cls, predicate: Callable[["BrokerView", float], bool] | str) -> TriggerSpec:
        if isinstance(predicate, str):
            predicate = load_predicate(predicate)
        return cls(TriggerKind.CUSTOM, predicate=predicate)


def load_predicate(ref: str) -> Callable[["BrokerView", float], bool]:
    """Resolve ``"package.module:function"``."""
    module, _, name = ref.partition(":")
    if not module or not name:
        raise ValueError(f"predicate reference must look like 'module:function', got {ref!r}")
    fn = getattr(importlib.import_module(module), name)
    if not callable(fn):
        raise ValueError(f"{ref} is not callable")
    return fn


@dataclass(frozen=True)
class BrokerView:
    """What a trigger may look at: counts for the open round plus the clock anchors."""

    round: int
    expected: int
    arrived: int
    unclaimed_updates: int
    unclaimed_partials: int
    opened_at: float
    last_fire_at: float
    closed: bool
    fanout: int
    policy: RoundPolicy


class Action(str, enum.Enum):
    FIRE = "fire"
    HOLD = "hold"
    CLOSE_ROUND = "close_round"


@dataclass(frozen=True)
class Batch:
    kind: str  # "update" for a leaf function, "partial" for an intermediate one
    count: int


@dataclass(frozen=True)
class Decision:
    action: Action
    batches: tuple[Batch, ...] = ()

    @property
    def closes(self) -> bool:
        return self.action is Action.CLOSE_ROUND


HOLD = Decision(Action.HOLD)


def _chunk(total: int, size: int, kind: str, min_size: int = 1) -> list[Batch]:
    out = [Batch(kind, size)] * (total // size)
    rest = total % size
    if rest >= min_size:
        out.append(Batch(kind, rest))
    return out


def evaluate_trigger(spec: TriggerSpec, view: BrokerView, clock: float) -> Decision:
    """Pure trigger decision for one instant.

    The round closes when its policy says so or, for quorum triggers, when
    the trigger's own fraction has responded or its wait has run out.  After
    closing, every remaining accepted update is flushed in fanout-sized
    leaf batches.  Intermediate batches start whenever at least two partial
    aggregates are waiting.
    """
    close = False
    if not view.closed:
        close = view.policy.should_close(view.arrived, view.expected, view.opened_at, clock)
        if spec.kind is TriggerKind.QUORUM:
            close = close or (
                view.arrived >= quorum_count(spec.fraction, view.expected)
                or clock >= view.opened_at + spec.max_wait_seconds
            )
    closed = view.closed or close
    u, k = view.unclaimed_updates, view.fanout
    if closed:
        leaves = _chunk(u, k, UPDATE)
    elif spec.kind is TriggerKind.EVERY_K:
        leaves = [Batch(UPDATE, spec.k)] * (u // spec.k)
    elif spec.kind is TriggerKind.EVERY_T:
        leaves = _chunk(u, k, UPDATE) if clock - view.last_fire_at >= spec.t else []
    elif spec.kind is TriggerKind.QUORUM:
        leaves = [Batch(UPDATE, k)] * (u // k)
    else:
        leaves = _chunk(u, k, UPDATE) if u and spec.predicate(view, clock) else []
    inter = _chunk(view.unclaimed_partials, k, PARTIAL, min_size=2) if view.unclaimed_partials >= 2 else []
    batches = tuple(leaves + inter)
    if close:
        return Decision(Action.CLOSE_ROUND, batches)
    return Decision(Action.FIRE, batches) if batches else HOLD


def detect_round_complete(closed: bool, accepted: int, partials: list[PartialAggregate]) -> PartialAggregate | None:
    """The partial that covers the whole closed round, if one exists yet."""
    if not closed or accepted == 0:
        return None
    for p in partials:
        if len(p.contributors) == accepted:
            return p
    return None


class InvocationRole(str, enum.Enum):
    LEAF = "leaf"
    INTERMEDIATE = "intermediate"
    FINALIZER = "finalizer"
    TRIGGER_EVAL = "trigger_eval"


class Outcome(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    CRASHED = "crashed"


@dataclass
class Invocation:
    invocation_id: str
    role: InvocationRole
    round: int
    claimed: tuple[int, ...]
    requested_at: float
    started_at: float | None = None
    ends_at: float | None = None
    pod_id: int | None = None
    outcome: Outcome = Outcome.RUNNING


class ServerlessBackend(Backend):
    """Trigger-driven aggregation over a broker and an elastic pod pool.

    Args:
        job_id: prefix of the two job topics.
        trigger: when to start aggregation functions.
        fanout: maximum inputs per function.
        compute: per-input and finalize costs of one function.
        pool: pod pool; a default pool on ``kernel`` when omitted.
        crash_prob: Bernoulli crash probability per invocation, drawn on
            the ``faults`` stream when the function would complete.
        tick_seconds: period of the trigger re-evaluation while a round is open.
        broker: shared broker; a fresh one when omitted.
    """

    name = "serverless"

    def __init__(
        self,
        kernel: Kernel,
        policy: RoundPolicy,
        on_model: Callable[[GlobalModel, RoundRecord], None],
        job_id: str = "job",
        trigger: TriggerSpec | None = None,
        fanout: int = 10,
        compute: ContainerSpec = ContainerSpec(),
        pool: PodPool | None = None,
        crash_prob: float = 0.0,
        tick_seconds: float = 1.0,
        broker: Broker | None = None,
    ) -> None:
        super().__init__(kernel, policy, on_model)
        if fanout < 2:
            raise ValueError("fanout must be >= 2")
        if not tick_seconds > 0:
            raise ValueError("tick_seconds must be positive")
        self.job_id = job_id
        self.trigger = trigger or TriggerSpec.every_k(fanout)
        self.fanout = fanout
        self.compute = compute
        self.pool = pool or PodPool(kernel)
        self.crash = Distribution.bernoulli(crash_prob)
        self.tick_seconds = tick_seconds
        self.broker = broker or Broker(clock=lambda: kernel.now)
        self.agg_topic = f"{job_id}-Agg"
        self.parties_topic = f"{job_id}-Parties"
        if self.agg_topic not in self.broker.topics:
            self.broker.create_job_topics(job_id)
        self.broker.subscribe(self.parties_topic, self._on_message)
        self.invocations: list[Invocation] = []
        self._eval_pending = False
        self._tick_event = None
        self._last_fire = 0.0
        self._cutoff: int | None = None  # first offset after the round closed
        self._finalizing = False
        self._faults = kernel.stream("faults")

    # -- inputs --------------------------------------------------------------

    def submit(self, update: ModelUpdate) -> None:
        if update.round not in self.records:
            raise ValueError(f"update for unknown round {update.round}")
        self.broker.publish(self.parties_topic, update, PARTY)

    def _on_message(self, msg: QueuedMessage) -> None:
        if msg.kind == UPDATE:
            rec = self.records[msg.round]
            if rec.closed:
                rec.discarded_late += 1
                log.debug("late update %s left unclaimed", msg.payload.update_id)
                return
            rec.arrivals[msg.payload.update_id] = msg.payload
        self._request_eval()

    def _request_eval(self) -> None:
        if not self._eval_pending:
            self._eval_pending = True
            self.kernel.schedule(self.kernel.now, self._evaluate)

    # -- round lifecycle -----------------------------------------------------

    def _on_open(self, rec: RoundRecord) -> None:
        self._last_fire = rec.opened_at
        self._cutoff = None
        self._finalizing = False
        self._tick_event = self.kernel.schedule_in(self.tick_seconds, self._tick, rec.round)

    def _tick(self, round_no: int) -> None:
        rec = self.current
        if rec is None or rec.round != round_no:
            return
        self._request_eval()
        self._tick_event = self.kernel.schedule_in(self.tick_seconds, self._tick, round_no)

    def _check_close(self) -> None:
        # closing is the trigger's call; deadlines just wake it up
        if self.current is not None:
            self._request_eval()

    def _on_close(self, rec: RoundRecord) -> None:
        self._cutoff = len(self.broker.topics[self.parties_topic])

    def view(self) -> BrokerView:
        rec = self.current
        unclaimed = self.broker.count_unclaimed(self.parties_topic, MessageFilter(UPDATE, rec.round))
        if rec.closed:
            unclaimed -= rec.discarded_late
        return BrokerView(
            round=rec.round,
            expected=len(rec.expected),
            arrived=len(rec.arrivals),
            unclaimed_updates=unclaimed,
            unclaimed_partials=self.broker.count_unclaimed(self.parties_topic, MessageFilter(PARTIAL, rec.round)),
            opened_at=rec.opened_at,
            last_fire_at=self._last_fire,
            closed=rec.closed,
            fanout=self.fanout,
            policy=self.policy,
        )

    def _evaluate(self) -> None:
        self._eval_pending = False
        rec = self.current
        if rec is None:
            return
        now = self.kernel.now
        decision = evaluate_trigger(self.trigger, self.view(), now)
        if decision.closes:
            self._close(rec)
            if rec.complete:  # empty round, model carried forward
                return
        if any(b.kind == UPDATE for b in decision.batches):
            self._last_fire = now
        for batch in decision.batches:
            role = InvocationRole.LEAF if batch.kind == UPDATE else InvocationRole.INTERMEDIATE
            self._spawn(role, rec, batch.kind, batch.count)
        self._maybe_finalize(rec)

    def _maybe_finalize(self, rec: RoundRecord) -> None:
        if self._finalizing or not rec.closed:
            return
        if self.broker.count_unclaimed(self.parties_topic, MessageFilter(PARTIAL, rec.round)) != 1:
            return
        partials = [m.payload for m in self.broker.unclaimed(self.parties_topic, MessageFilter(PARTIAL, rec.round))]
        root = detect_round_complete(rec.closed, len(rec.accepted), partials)
        if root is not None:
            self._finalizing = True
            self._spawn(InvocationRole.FINALIZER, rec, PARTIAL, 1)

    # -- invocations -----------------------------------------------------------

    def _spawn(self, role: InvocationRole, rec: RoundRecord, kind: str, count: int) -> None:
        inv_id = f"{self.job_id}-r{rec.round}-i{len(self.invocations)}"
        cutoff = self._cutoff
        flt = MessageFilter(kind, rec.round)
        if kind == UPDATE and cutoff is not None:
            flt = MessageFilter(kind, rec.round, lambda m: m.offset < cutoff)
        msgs = self.broker.claim_batch(self.parties_topic, count, inv_id, flt, AGGREGATOR)
        if not msgs:
            self.broker.ack(inv_id)
            if role is InvocationRole.FINALIZER:
                self._finalizing = False
            return
        inv = Invocation(inv_id, role, rec.round, tuple(m.offset for m in msgs), self.kernel.now)
        self.invocations.append(inv)
        self.pool.request(lambda pod_id, ready_at: self._start(inv, msgs, pod_id, ready_at))

    def _start(self, inv: Invocation, msgs: list[QueuedMessage], pod_id: int, ready_at: float) -> None:
        inv.pod_id = pod_id
        inv.started_at = ready_at
        if inv.role is InvocationRole.FINALIZER:
            work = self.compute.finalize_seconds
        else:
            work = self.compute.fuse_seconds(len(msgs))
        inv.ends_at = ready_at + work
        self.kernel.schedule(inv.ends_at, self._complete, (inv, msgs))

    def _complete(self, item: tuple[Invocation, list[QueuedMessage]]) -> None:
        inv, msgs = item
        rec = self.records[inv.round]
        if self.crash.sample(self._faults) == 1.0:
            inv.outcome = Outcome.CRASHED
            rec.crashes += 1
            self.broker.release(inv.invocation_id)
            self.pool.release(inv.pod_id)
            if inv.role is InvocationRole.FINALIZER:
                self._finalizing = False
            log.debug("invocation %s crashed, %d message(s) released", inv.invocation_id, len(msgs))
            self._request_eval()
            return
        payloads = [m.payload for m in msgs]
        if inv.role is InvocationRole.LEAF:
            out = leaf_aggregate(payloads)
        else:
            out = merge_all(payloads)
        inv.outcome = Outcome.COMPLETED
        rec.invocations += 1
        if inv.role is InvocationRole.FINALIZER:
            model = finalize(out, self.model)
            rec.root_contributors = len(out.contributors)
            self.broker.publish(self.agg_topic, model, AGGREGATOR)
            self.broker.ack(inv.invocation_id)
            self.pool.release(inv.pod_id)
            self._finalizing = False
            self._publish_model(model, rec)
            return
        self.broker.publish(self.parties_topic, out, AGGREGATOR)
        self.broker.ack(inv.invocation_id)
        self.pool.release(inv.pod_id)

    # -- accounting ------------------------------------------------------------

    def stop(self) -> None:
        super().stop()
        if self._tick_event is not None:
            self._tick_event.cancel()

    def usage(self, end: float) -> ResourceUsage:
        return ResourceUsage(self.pool.container_seconds(end), self.pool.busy_seconds(end), len(self.pool.pods))

    def latest_model(self) -> GlobalModel | None:
        """What a (re)joining party downloads from ``<job>-Agg``."""
        msgs = self.broker.read(self.agg_topic, PARTY)
        return msgs[-1].payload if msgs else None


def run_round_serverless(
    updates,
    model: GlobalModel,
    compute: ContainerSpec = ContainerSpec(),
    policy: RoundPolicy = RoundPolicy(),
    fanout: int = 10,
    trigger: TriggerSpec | None = None,
    crash_prob: float = 0.0,
    seed: int = 0,
):
    """Fuse one round with aggregation functions; returns ``(next_model, RoundMetrics)``."""
    from .metrics import RoundMetrics

    kernel = Kernel(seed)
    result: dict = {}
    backend = ServerlessBackend(
        kernel,
        policy,
        lambda m, rec: result.update(model=m, record=rec),
        trigger=trigger,
        fanout=fanout,
        compute=compute,
        crash_prob=crash_prob,
    )
    kernel.schedule(0.0, lambda: backend.open_round(model, {u.party_id for u in updates}))
    for u in updates:
        kernel.schedule(max(0.0, u.submitted_at), backend.submit, u)
    kernel.run_until(lambda: "model" in result)
    backend.stop()
    if "model" not in result:
        raise RuntimeError("round did not complete")
    return result["model"], RoundMetrics.from_record(result["record"])
