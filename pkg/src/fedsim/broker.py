"""In-process topic broker with claim flags.

Each job owns two topics: ``<job>-Agg`` (global models, written only by
aggregators, read by everyone) and ``<job>-Parties`` (party updates and
partial aggregates, written by anyone, read only by aggregators).  Messages
are retained for the whole run.

A consuming invocation *claims* messages, which hides them from every other
claimant.  It then either *acks* (after publishing its output: claimed
messages become consumed for good) or is *released* after a crash (claimed
messages go back to unclaimed and will be handed to the next claimant).
Claims are taken inside one kernel event, so they are atomic.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .fusion import GlobalModel, ModelUpdate, PartialAggregate

log = logging.getLogger(__name__)

AGGREGATOR = "aggregator"
PARTY = "party"


class BrokerError(RuntimeError):
    pass


class UnknownTopic(BrokerError):
    pass


class AclViolation(BrokerError):
    pass


class ClaimStateError(BrokerError):
    pass


class ClaimState(str, enum.Enum):
    UNCLAIMED = "unclaimed"
    CLAIMED = "claimed"
    CONSUMED = "consumed"


def payload_kind(payload: Any) -> str:
    if isinstance(payload, ModelUpdate):
        return "update"
    if isinstance(payload, PartialAggregate):
        return "partial"
    if isinstance(payload, GlobalModel):
        return "model"
    return type(payload).__name__


@dataclass
class QueuedMessage:
    topic: str
    offset: int
    payload: Any
    kind: str
    round: int | None
    published_at: float
    state: ClaimState = ClaimState.UNCLAIMED
    claimed_by: str | None = None


@dataclass(frozen=True)
class Acl:
    publishers: frozenset[str]
    consumers: frozenset[str]
    readers: frozenset[str]

    @classmethod
    def of(cls, publish: Iterable[str], consume: Iterable[str], read: Iterable[str] = ()) -> Acl:
        consume = frozenset(consume)
        return cls(frozenset(publish), consume, frozenset(read) | consume)


def agg_topic_acl() -> Acl:
    return Acl.of(publish=[AGGREGATOR], consume=[AGGREGATOR], read=[AGGREGATOR, PARTY])


def parties_topic_acl() -> Acl:
    return Acl.of(publish=[PARTY, AGGREGATOR], consume=[AGGREGATOR])


@dataclass(frozen=True)
class MessageFilter:
    kind: str | None = None
    round: int | None = None
    predicate: Callable[[QueuedMessage], bool] | None = None

    def matches(self, msg: QueuedMessage) -> bool:
        if self.kind is not None and msg.kind != self.kind:
            return False
        if self.round is not None and msg.round != self.round:
            return False
        return self.predicate is None or self.predicate(msg)


@dataclass
class Topic:
    name: str
    acl: Acl
    messages: list[QueuedMessage] = field(default_factory=list)
    # unclaimed offsets bucketed by (kind, round); dicts keep insertion order
    _unclaimed: dict[tuple[str, int | None], dict[int, None]] = field(
        default_factory=lambda: defaultdict(dict)
    )

    def __len__(self) -> int:
        return len(self.messages)


class Broker:
    """Topic registry plus the per-message claim state machine.

    Args:
        clock: zero-argument callable returning the current virtual time,
            used only to timestamp messages and trace records.
        trace: keep a list of ``(topic, offset, event, virtual_time)`` records.
    """

    def __init__(self, clock: Callable[[], float] = lambda: 0.0, trace: bool = False) -> None:
        self._clock = clock
        self.topics: dict[str, Topic] = {}
        self._claims: dict[str, list[QueuedMessage]] = {}
        self._finished: set[str] = set()
        self._subscribers: dict[str, list[Callable[[QueuedMessage], None]]] = defaultdict(list)
        self.trace: list[dict[str, Any]] | None = [] if trace else None

    def _record(self, topic: str, offset: int, event: str) -> None:
        if self.trace is not None:
            self.trace.append(
                {"topic": topic, "offset": offset, "event": event, "virtual_time": self._clock()}
            )

    def _topic(self, name: str) -> Topic:
        try:
            return self.topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    def create_topic(self, name: str, acl: Acl) -> Topic:
        if name in self.topics:
            raise BrokerError(f"topic {name!r} already exists")
        topic = Topic(name, acl)
        self.topics[name] = topic
        return topic

    def create_job_topics(self, job_id: str) -> tuple[Topic, Topic]:
        return (
            self.create_topic(f"{job_id}-Agg", agg_topic_acl()),
            self.create_topic(f"{job_id}-Parties", parties_topic_acl()),
        )

    def subscribe(self, topic: str, callback: Callable[[QueuedMessage], None]) -> None:
        """Call ``callback(message)`` synchronously after every publish to ``topic``."""
        self._topic(topic)
        self._subscribers[topic].append(callback)

    def publish(self, topic: str, payload: Any, publisher_role: str) -> int:
        t = self._topic(topic)
        if publisher_role not in t.acl.publishers:
            raise AclViolation(f"role {publisher_role!r} may not publish to {topic!r}")
        kind = payload_kind(payload)
        msg = QueuedMessage(
            topic, len(t.messages), payload, kind, getattr(payload, "round", None), self._clock()
        )
        t.messages.append(msg)
        t._unclaimed[(kind, msg.round)][msg.offset] = None
        self._record(topic, msg.offset, "publish")
        for cb in self._subscribers.get(topic, ()):
            cb(msg)
        return msg.offset

    def read(self, topic: str, role: str, flt: MessageFilter | None = None) -> list[QueuedMessage]:
        """Non-claiming read (subscribers downloading the global model)."""
        t = self._topic(topic)
        if role not in t.acl.readers:
            raise AclViolation(f"role {role!r} may not read {topic!r}")
        return [m for m in t.messages if flt is None or flt.matches(m)]

    def _candidates(self, t: Topic, flt: MessageFilter) -> Iterable[int]:
        # callers must not mutate buckets while iterating the result
        if flt.kind is not None and flt.round is not None:
            return iter(t._unclaimed.get((flt.kind, flt.round), ()))
        offsets: list[int] = []
        for (kind, rnd), bucket in t._unclaimed.items():
            if (flt.kind is None or kind == flt.kind) and (flt.round is None or rnd == flt.round):
                offsets.extend(bucket)
        offsets.sort()
        return offsets

    def count_unclaimed(self, topic: str, flt: MessageFilter) -> int:
        t = self._topic(topic)
        if flt.predicate is None and flt.kind is not None and flt.round is not None:
            return len(t._unclaimed.get((flt.kind, flt.round), ()))
        return sum(flt.matches(t.messages[o]) for o in self._candidates(t, flt))

    def unclaimed(self, topic: str, flt: MessageFilter) -> list[QueuedMessage]:
        t = self._topic(topic)
        return [t.messages[o] for o in self._candidates(t, flt) if flt.matches(t.messages[o])]

    def claim_batch(
        self,
        topic: str,
        max_count: int,
        invocation_id: str,
        flt: MessageFilter | None = None,
        consumer_role: str = AGGREGATOR,
    ) -> list[QueuedMessage]:
        """Atomically claim up to ``max_count`` matching unclaimed messages, oldest first."""
        t = self._topic(topic)
        if consumer_role not in t.acl.consumers:
            raise AclViolation(f"role {consumer_role!r} may not consume {topic!r}")
        if invocation_id in self._finished:
            raise ClaimStateError(f"invocation {invocation_id!r} already acked or released")
        flt = flt or MessageFilter()
        taken: list[QueuedMessage] = []
        if max_count <= 0:
            return taken
        for offset in self._candidates(t, flt):
            msg = t.messages[offset]
            if flt.matches(msg):
                taken.append(msg)
                if len(taken) == max_count:
                    break
        for msg in taken:
            msg.state = ClaimState.CLAIMED
            msg.claimed_by = invocation_id
            del t._unclaimed[(msg.kind, msg.round)][msg.offset]
            self._record(topic, msg.offset, f"claim:{invocation_id}")
        self._claims.setdefault(invocation_id, []).extend(taken)
        return taken

    def claimed_by(self, invocation_id: str) -> list[QueuedMessage]:
        return list(self._claims.get(invocation_id, ()))

    def _close(self, invocation_id: str, verb: str) -> list[QueuedMessage]:
        if invocation_id in self._finished:
            raise ClaimStateError(f"{verb} after invocation {invocation_id!r} was already closed")
        self._finished.add(invocation_id)
        return self._claims.pop(invocation_id, [])

    def ack(self, invocation_id: str) -> int:
        """Mark every message claimed by ``invocation_id`` as consumed."""
        msgs = self._close(invocation_id, "ack")
        for msg in msgs:
            if msg.state is not ClaimState.CLAIMED or msg.claimed_by != invocation_id:
                raise ClaimStateError(f"message {msg.topic}@{msg.offset} not held by {invocation_id}")
            msg.state = ClaimState.CONSUMED
            self._record(msg.topic, msg.offset, "ack")
        return len(msgs)

    def release(self, invocation_id: str) -> int:
        """Return every message claimed by ``invocation_id`` to the unclaimed pool."""
        msgs = self._close(invocation_id, "release")
        touched: set[tuple[str, tuple[str, int | None]]] = set()
        for msg in msgs:
            if msg.state is not ClaimState.CLAIMED or msg.claimed_by != invocation_id:
                raise ClaimStateError(f"message {msg.topic}@{msg.offset} not held by {invocation_id}")
            msg.state = ClaimState.UNCLAIMED
            msg.claimed_by = None
            key = (msg.kind, msg.round)
            self.topics[msg.topic]._unclaimed[key][msg.offset] = None
            touched.add((msg.topic, key))
            self._record(msg.topic, msg.offset, "release")
        for name, key in touched:
            buckets = self.topics[name]._unclaimed
            buckets[key] = dict.fromkeys(sorted(buckets[key]))
        return len(msgs)

    def state_counts(self, topic: str) -> dict[ClaimState, int]:
        counts = dict.fromkeys(ClaimState, 0)
        for m in self._topic(topic).messages:
            counts[m.state] += 1
        return counts

    def dump_trace(self, path: str | Path) -> None:
        """Write the trace as newline-delimited JSON."""
        if self.trace is None:
            raise BrokerError("broker was created without trace=True")
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
