"""Always-on aggregation architectures: one central aggregator, or a static k-ary tree.

Both keep their containers provisioned for the whole job.  A static tree
node waits until every child has reported for the round, fuses the inputs
serially (``per_update_cpu_seconds`` per input), and forwards one partial
aggregate to its parent; the root also finalizes.  Nodes are watched with
heartbeats: a node that misses ``heartbeat_misses`` beats is restarted after
``startup_seconds`` and its children retransmit what they had sent.

Adding parties to a static tree means building the larger tree, starting
the new nodes one by one and re-wiring parents; the delay is charged to the
round in which the join happened.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .backend import Backend, ResourceUsage, RoundPolicy, RoundRecord
from .fusion import (
    GlobalModel,
    ModelUpdate,
    PartialAggregate,
    finalize,
    leaf_aggregate,
    merge_all,
)
from .kernel import Kernel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContainerSpec:
    """Per-container compute model.

    ``per_update_cpu_seconds`` is the time one container needs to ingest and
    fuse one model-sized input; ``finalize_seconds`` covers the division by
    ``N`` and the server optimizer step.
    """

    vcpus: int = 2
    ram_gb: float = 4.0
    per_update_cpu_seconds: float = 0.5
    finalize_seconds: float = 0.5
    startup_seconds: float = 1.5

    def __post_init__(self) -> None:
        if min(self.vcpus, self.ram_gb, self.per_update_cpu_seconds, self.startup_seconds) <= 0:
            raise ValueError("container spec values must be positive")
        if self.finalize_seconds < 0:
            raise ValueError("finalize_seconds must be non-negative")

    def fuse_seconds(self, inputs: int) -> float:
        return inputs * self.per_update_cpu_seconds


@dataclass(frozen=True)
class TreeNode:
    node_id: str
    level: int
    index: int
    children: tuple  # party ids at level 0, node ids above
    parent: str | None

    @property
    def is_leaf(self) -> bool:
        return self.level == 0


@dataclass(frozen=True)
class TreePlan:
    fanout: int
    parties: tuple[int, ...]
    levels: tuple[tuple[TreeNode, ...], ...]

    @property
    def party_count(self) -> int:
        return len(self.parties)

    @property
    def leaves(self) -> tuple[TreeNode, ...]:
        return self.levels[0]

    @property
    def internal(self) -> tuple[tuple[TreeNode, ...], ...]:
        return self.levels[1:]

    @property
    def root(self) -> TreeNode:
        return self.levels[-1][0]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def node_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def nodes(self) -> Iterable[TreeNode]:
        for lv in self.levels:
            yield from lv

    def node(self, node_id: str) -> TreeNode:
        level, index = _parse_node_id(node_id)
        return self.levels[level][index]

    def leaf_of(self) -> dict[int, str]:
        return {pid: leaf.node_id for leaf in self.leaves for pid in leaf.children}


def node_id(level: int, index: int) -> str:
    return f"L{level}:{index}"


def _parse_node_id(nid: str) -> tuple[int, int]:
    level, index = nid[1:].split(":")
    return int(level), int(index)


def _chunks(seq: Sequence, k: int) -> list[tuple]:
    return [tuple(seq[i : i + k]) for i in range(0, len(seq), k)]


def build_tree_for(parties: Sequence[int], k: int) -> TreePlan:
    """Complete k-ary tree over ``parties`` in contiguous ascending blocks."""
    if k < 2:
        raise ValueError(f"fanout must be >= 2, got {k}")
    parties = tuple(sorted(parties))
    if not parties:
        raise ValueError("tree needs at least one party")
    if len(set(parties)) != len(parties):
        raise ValueError("duplicate party ids")
    groups: list[list[tuple]] = [_chunks(parties, k)]
    while len(groups[-1]) > 1:
        groups.append(_chunks(list(range(len(groups[-1]))), k))
    levels = []
    top = len(groups) - 1
    for lvl, blocks in enumerate(groups):
        # parent index of block i at this level is the chunk containing i at the next level
        nodes = []
        for i, block in enumerate(blocks):
            parent = node_id(lvl + 1, i // k) if lvl < top else None
            children = block if lvl == 0 else tuple(node_id(lvl - 1, c) for c in block)
            nodes.append(TreeNode(node_id(lvl, i), lvl, i, children, parent))
        levels.append(tuple(nodes))
    return TreePlan(k, parties, tuple(levels))


def build_tree(n: int, k: int) -> TreePlan:
    if n < 1:
        raise ValueError(f"party count must be >= 1, got {n}")
    return build_tree_for(range(n), k)


@dataclass(frozen=True)
class Reconfiguration:
    plan: TreePlan
    delay_seconds: float
    events: int
    new_nodes: tuple[str, ...]


def reconfigure_tree(
    plan: TreePlan,
    joining_parties: Sequence[int],
    compute: ContainerSpec = ContainerSpec(),
    retopology_seconds: float = 2.0,
) -> Reconfiguration:
    """Grow ``plan`` for ``joining_parties``.

    Delay is ``new_nodes * startup_seconds + retopology_seconds`` (the
    constant is paid once whenever anything changes).  ``events`` counts the
    tree levels whose membership or wiring changed.
    """
    joining = tuple(joining_parties)
    if set(joining) & set(plan.parties):
        raise ValueError("joining parties already in the tree")
    if not joining:
        return Reconfiguration(plan, 0.0, 0, ())
    new = build_tree_for(plan.parties + joining, plan.fanout)
    old_nodes = {n.node_id: n for n in plan.nodes()}
    created = tuple(n.node_id for n in new.nodes() if n.node_id not in old_nodes)
    changed_levels = set()
    for n in new.nodes():
        old = old_nodes.get(n.node_id)
        if old is None or old.children != n.children or old.parent != n.parent:
            changed_levels.add(n.level)
    delay = len(created) * compute.startup_seconds + retopology_seconds
    return Reconfiguration(new, delay, len(changed_levels), created)


# -- runtimes ----------------------------------------------------------------


class CentralizedBackend(Backend):
    """One aggregator fuses every accepted update serially once the round closes."""

    name = "centralized"

    def __init__(
        self,
        kernel: Kernel,
        policy: RoundPolicy,
        on_model: Callable[[GlobalModel, RoundRecord], None],
        compute: ContainerSpec = ContainerSpec(),
    ) -> None:
        super().__init__(kernel, policy, on_model)
        self.compute = compute
        self.busy_seconds = 0.0
        self._busy_until = 0.0

    def _on_close(self, rec: RoundRecord) -> None:
        updates = rec.accepted_updates()
        start = max(self.kernel.now, self._busy_until)
        duration = self.compute.fuse_seconds(len(updates)) + self.compute.finalize_seconds
        self._busy_until = start + duration
        self.busy_seconds += duration
        rec.invocations += 1
        self.kernel.schedule(start + duration, self._done, (rec, updates))

    def _done(self, item: tuple[RoundRecord, list[ModelUpdate]]) -> None:
        rec, updates = item
        partial = leaf_aggregate(updates)
        rec.root_contributors = len(partial.contributors)
        self._publish_model(finalize(partial, self.model), rec)

    def usage(self, end: float) -> ResourceUsage:
        return ResourceUsage(end, min(self.busy_seconds, end), 1)


@dataclass
class StaticNodeState:
    node_id: str
    created_at: float
    alive: bool = True
    last_heartbeat: float = 0.0
    received: dict = field(default_factory=dict)
    forwarded: object | None = None  # output sent upward this round, kept for retransmission
    busy_until: float = 0.0
    busy_seconds: float = 0.0
    pending: object | None = None  # completion event while fusing
    restart_at: float | None = None


class StaticTreeBackend(Backend):
    """Always-on k-ary aggregation tree driven by kernel events.

    Args:
        plan: initial tree; must cover every party that will submit.
        compute: container model for every node.
        heartbeat_interval: seconds between heartbeat sweeps.
        heartbeat_misses: missed beats before a node is declared dead.
        retopology_seconds: fixed re-wiring cost per reconfiguration.
    """

    name = "static_tree"
    admits_joiners_mid_round = False

    def __init__(
        self,
        kernel: Kernel,
        policy: RoundPolicy,
        on_model: Callable[[GlobalModel, RoundRecord], None],
        plan: TreePlan,
        compute: ContainerSpec = ContainerSpec(),
        heartbeat_interval: float = 5.0,
        heartbeat_misses: int = 3,
        retopology_seconds: float = 2.0,
    ) -> None:
        super().__init__(kernel, policy, on_model)
        self.plan = plan
        self.compute = compute
        self.heartbeat_interval = heartbeat_interval
        self.heartbeat_misses = heartbeat_misses
        self.retopology_seconds = retopology_seconds
        self.state: dict[str, StaticNodeState] = {
            n.node_id: StaticNodeState(n.node_id, kernel.now, last_heartbeat=kernel.now)
            for n in plan.nodes()
        }
        self._leaf_of = plan.leaf_of()
        self._pending_plan: TreePlan | None = None
        self._heartbeat_event = None
        self._running = True
        self.failures_detected = 0
        self._dead: set[str] = set()
        self._last_sweep = kernel.now
        self._accepted_by_leaf: dict[str, set[int]] = {}
        self._schedule_heartbeat()

    # -- heartbeats --------------------------------------------------------

    def _schedule_heartbeat(self) -> None:
        self._heartbeat_event = self.kernel.schedule_in(self.heartbeat_interval, self._heartbeat)

    def _heartbeat(self) -> None:
        if not self._running:
            return
        now = self.kernel.now
        self._last_sweep = now
        timeout = self.heartbeat_misses * self.heartbeat_interval
        # live nodes beat implicitly; only the dead ones need looking at
        for nid in sorted(self._dead):
            st = self.state[nid]
            if st.restart_at is None and now - st.last_heartbeat >= timeout - 1e-9:
                st.restart_at = now + self.compute.startup_seconds
                self.failures_detected += 1
                log.info("node %s declared dead at t=%.1f, restarting", nid, now)
                self.kernel.schedule(st.restart_at, self._recover, nid)
        self._schedule_heartbeat()

    def kill(self, node_id: str) -> None:
        """Crash a node: in-flight work and received inputs are lost."""
        st = self.state[node_id]
        if not st.alive:
            return
        st.alive = False
        st.last_heartbeat = self._last_sweep
        st.received = {}
        self._dead.add(node_id)
        if st.pending is not None:
            st.pending.cancel()
            st.pending = None
        if self.current is not None:
            self.current.crashes += 1

    def schedule_kill(self, node_id: str, at: float) -> None:
        self.kernel.schedule(at, self.kill, node_id)

    def _recover(self, nid: str) -> None:
        st = self.state[nid]
        st.alive = True
        st.restart_at = None
        self._dead.discard(nid)
        st.last_heartbeat = self.kernel.now
        st.busy_until = self.kernel.now
        rec = self.current
        if rec is None:
            return
        node = self.plan.node(nid)
        # children retransmit whatever they already sent this round
        if node.is_leaf:
            admissible = set(self._admissible(rec))
            for upd in rec.arrivals.values():
                if upd.update_id in admissible and self._leaf_of.get(upd.party_id) == nid:
                    st.received[upd.party_id] = upd
        else:
            for child in node.children:
                out = self.state[child].forwarded
                if out is not None:
                    st.received[child] = out
        self._try_fuse(node)

    # -- round flow ----------------------------------------------------------

    def _on_open(self, rec: RoundRecord) -> None:
        if self._pending_plan is not None:
            self.plan = self._pending_plan
            self._pending_plan = None
            self._leaf_of = self.plan.leaf_of()
        self._accepted_by_leaf = {}
        for st in self.state.values():
            st.received = {}
            st.forwarded = None
        missing = [p for p in rec.expected if p not in self._leaf_of]
        if missing:
            raise ValueError(f"parties {missing[:5]} are not in the tree plan")

    def join(self, party_ids: Iterable[int]) -> None:
        joining = sorted(party_ids)
        base = self._pending_plan or self.plan
        recfg = reconfigure_tree(base, joining, self.compute, self.retopology_seconds)
        for nid in recfg.new_nodes:
            self.state[nid] = StaticNodeState(nid, self.kernel.now, last_heartbeat=self.kernel.now)
        self._pending_plan = recfg.plan
        rec = self.current or self.records.get(max(self.records, default=0))
        if rec is not None:
            rec.reconfig_events += recfg.events
            rec.reconfig_delay += recfg.delay_seconds

    def _admissible(self, rec: RoundRecord) -> Iterable[str]:
        return rec.accepted if rec.closed else rec.arrivals

    def _expected_children(self, node: TreeNode, rec: RoundRecord) -> set:
        if not node.is_leaf:
            return set(node.children)
        if rec.closed:
            return self._accepted_by_leaf.get(node.node_id, set())
        return {p for p in node.children if p in rec.expected}

    def _on_arrival(self, rec: RoundRecord, update: ModelUpdate) -> None:
        leaf = self.plan.node(self._leaf_of[update.party_id])
        st = self.state[leaf.node_id]
        if st.alive:
            st.received[update.party_id] = update
            self._try_fuse(leaf)

    def _on_close(self, rec: RoundRecord) -> None:
        self._accepted_by_leaf = {}
        for uid in rec.accepted:
            pid = rec.arrivals[uid].party_id
            self._accepted_by_leaf.setdefault(self._leaf_of[pid], set()).add(pid)
        # leaves waiting on parties that never answered proceed with what they have
        for leaf in self.plan.leaves:
            self._try_fuse(leaf)

    def _try_fuse(self, node: TreeNode) -> None:
        rec = self.current
        st = self.state[node.node_id]
        if rec is None or not st.alive or st.pending is not None or st.forwarded is not None:
            return
        expected = self._expected_children(node, rec)
        if not expected and not rec.closed:
            return
        if not expected.issubset(st.received):
            return
        inputs = [st.received[c] for c in sorted(expected)]
        start = max(self.kernel.now, st.busy_until)
        duration = self.compute.fuse_seconds(len(inputs))
        if node.parent is None:
            duration += self.compute.finalize_seconds
        st.busy_until = start + duration
        st.busy_seconds += duration
        st.pending = self.kernel.schedule(start + duration, self._fused, (node.node_id, inputs))

    def _fused(self, item: tuple[str, list]) -> None:
        nid, inputs = item
        rec = self.current
        st = self.state[nid]
        st.pending = None
        node = self.plan.node(nid)
        if node.is_leaf:
            if inputs:
                out = leaf_aggregate(inputs)
            else:
                out = PartialAggregate.empty(rec.round, self.model.dimension)
        else:
            out = merge_all(inputs)
        rec.invocations += 1
        st.forwarded = out
        if node.parent is None:
            rec.root_contributors = len(out.contributors)
            if len(out.contributors) != len(rec.accepted):
                raise RuntimeError(
                    f"root saw {len(out.contributors)} contributors, round accepted {len(rec.accepted)}"
                )
            model = finalize(out, self.model)
            if rec.reconfig_delay > 0:
                self.kernel.schedule_in(rec.reconfig_delay, self._publish_after_reconfig, (model, rec))
            else:
                self._publish_model(model, rec)
            return
        parent = self.plan.node(node.parent)
        pst = self.state[parent.node_id]
        if pst.alive:
            pst.received[nid] = out
            self._try_fuse(parent)

    def _publish_after_reconfig(self, item: tuple[GlobalModel, RoundRecord]) -> None:
        model, rec = item
        self._publish_model(model, rec)

    def stop(self) -> None:
        super().stop()
        self._running = False
        if self._heartbeat_event is not None:
            self._heartbeat_event.cancel()

    def usage(self, end: float) -> ResourceUsage:
        alive = math.fsum(max(0.0, end - st.created_at) for st in self.state.values())
        busy = math.fsum(st.busy_seconds for st in self.state.values())
        return ResourceUsage(alive, min(busy, alive), len(self.state))


# -- single-round conveniences -----------------------------------------------


def _run_single_round(make_backend, updates: Sequence[ModelUpdate], model: GlobalModel):
    from .metrics import RoundMetrics

    kernel = Kernel()
    result: dict = {}

    def on_model(m: GlobalModel, rec: RoundRecord) -> None:
        result["model"], result["record"] = m, rec

    backend = make_backend(kernel, on_model)
    kernel.schedule(0.0, lambda: backend.open_round(model, {u.party_id for u in updates}))
    for u in updates:
        kernel.schedule(max(0.0, u.submitted_at), backend.submit, u)
    kernel.run_until(lambda: "model" in result)
    backend.stop()
    if "model" not in result:
        raise RuntimeError("round did not complete")
    return result["model"], RoundMetrics.from_record(result["record"])


def run_round_centralized(
    updates: Sequence[ModelUpdate],
    model: GlobalModel,
    compute: ContainerSpec = ContainerSpec(),
    policy: RoundPolicy = RoundPolicy(),
):
    """Fuse one round on a single aggregator; returns ``(next_model, RoundMetrics)``."""
    if not updates:
        raise ValueError("centralized round needs at least one update")
    return _run_single_round(
        lambda k, cb: CentralizedBackend(k, policy, cb, compute), updates, model
    )


def run_round_static_tree(
    plan: TreePlan,
    updates: Sequence[ModelUpdate],
    model: GlobalModel,
    compute: ContainerSpec = ContainerSpec(),
    policy: RoundPolicy = RoundPolicy(),
):
    """Fuse one round on a static tree; returns ``(next_model, RoundMetrics)``."""
    return _run_single_round(
        lambda k, cb: StaticTreeBackend(k, policy, cb, plan, compute), updates, model
    )
