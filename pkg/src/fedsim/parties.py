"""Emulated participants on a synthetic quadratic task.

Party ``i`` holds ``n_i`` samples whose per-sample loss is
``0.5 * ||x - c_i||^2``, so the party loss is ``(n_i / 2) * ||x - c_i||^2``
and the per-sample gradient is ``x - c_i``.  With one exact local step the
FedAvg fixed point is the ``n_i``-weighted mean of the ``c_i``, which makes
end-to-end correctness checkable in closed form.  Optima are drawn around a
few cluster centres to get a non-IID spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fusion import FusionAlgorithm, FusionError, FusionKind, GlobalModel, ModelUpdate
from .kernel import Distribution, make_stream


@dataclass(frozen=True)
class SyntheticTask:
    party_id: int
    optimum: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        object.__setattr__(self, "optimum", np.asarray(self.optimum, dtype=np.float64))

    @property
    def dimension(self) -> int:
        return self.optimum.shape[0]

    def loss(self, x: np.ndarray) -> float:
        r = np.asarray(x, dtype=np.float64) - self.optimum
        return 0.5 * self.sample_count * float(r @ r)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Per-sample gradient, i.e. ``grad(loss) / n_i``."""
        return np.asarray(x, dtype=np.float64) - self.optimum


@dataclass(frozen=True)
class TaskSpec:
    dimension: int = 8
    clusters: int = 4
    cluster_spread: float = 1.0
    within_spread: float = 0.1
    samples_min: int = 50
    samples_max: int = 500


def make_tasks(party_ids: Sequence[int], spec: TaskSpec, seed: int) -> dict[int, SyntheticTask]:
    """Draw one task per party.  Each party's draw depends only on its id."""
    centres = make_stream(seed, "task-centres").normal(0.0, spec.cluster_spread, (spec.clusters, spec.dimension))
    tasks = {}
    for pid in party_ids:
        rng = make_stream(seed, "task", pid)
        centre = centres[pid % spec.clusters]
        optimum = centre + rng.normal(0.0, spec.within_spread, spec.dimension)
        n = int(rng.integers(spec.samples_min, spec.samples_max + 1))
        tasks[pid] = SyntheticTask(pid, optimum, n)
    return tasks


def initial_model(dimension: int, seed: int, server_lr: float = 1.0) -> GlobalModel:
    return GlobalModel(1, make_stream(seed, "init").normal(0.0, 1.0, dimension), server_lr)


def local_train(
    model: GlobalModel,
    task: SyntheticTask,
    algorithm: FusionAlgorithm,
    eta_local: float,
    submitted_at: float = 0.0,
    grad_noise: float = 0.0,
    noise_rng: np.random.Generator | None = None,
) -> ModelUpdate:
    """Run ``tau`` local gradient steps from the global model and return the delta."""
    if task.dimension != model.dimension:
        raise FusionError(f"task dimension {task.dimension} != model dimension {model.dimension}")
    start = model.weights
    x = start.copy()
    mu = algorithm.prox_mu if algorithm.kind is FusionKind.FEDPROX else 0.0
    for _ in range(algorithm.local_epochs_tau):
        g = x - task.optimum
        if mu:
            g += mu * (x - start)
        if grad_noise and noise_rng is not None:
            g += noise_rng.normal(0.0, grad_noise, g.shape)
        x = x - eta_local * g
    if not np.all(np.isfinite(x)):
        raise FusionError("local iterate diverged (eta_local too large?)")
    return ModelUpdate(
        party_id=task.party_id,
        round=model.round,
        delta=x - start,
        sample_count=task.sample_count,
        submitted_at=submitted_at,
    )


def local_train_many(
    model: GlobalModel,
    tasks: Sequence[SyntheticTask],
    algorithm: FusionAlgorithm,
    eta_local: float,
    submitted_at: Sequence[float],
    grad_noise: float = 0.0,
    noise_rng: np.random.Generator | None = None,
) -> list[ModelUpdate]:
    """:func:`local_train` for many parties at once.

    The arithmetic is elementwise, so without gradient noise every row is
    bit-identical to the single-party result.
    """
    if not tasks:
        return []
    if len(submitted_at) != len(tasks):
        raise ValueError("one submission time per task")
    optima = np.stack([t.optimum for t in tasks])
    if optima.shape[1] != model.dimension:
        raise FusionError(f"task dimension {optima.shape[1]} != model dimension {model.dimension}")
    start = model.weights
    x = np.broadcast_to(start, optima.shape).copy()
    mu = algorithm.prox_mu if algorithm.kind is FusionKind.FEDPROX else 0.0
    for _ in range(algorithm.local_epochs_tau):
        g = x - optima
        if mu:
            g += mu * (x - start)
        if grad_noise and noise_rng is not None:
            g += noise_rng.normal(0.0, grad_noise, g.shape)
        x = x - eta_local * g
    if not np.all(np.isfinite(x)):
        raise FusionError("local iterate diverged (eta_local too large?)")
    deltas = x - start
    return [
        ModelUpdate(party_id=t.party_id, round=model.round, delta=d, sample_count=t.sample_count, submitted_at=at)
        for t, d, at in zip(tasks, deltas, submitted_at)
    ]


@dataclass(frozen=True)
class MembershipChange:
    round: int
    count: int
    at: float = 0.0


@dataclass(frozen=True)
class PartyBehavior:
    think_time: Distribution = field(default_factory=lambda: Distribution.constant(10.0))
    dropout_prob: float = 0.0
    joins: tuple[MembershipChange, ...] = ()
    leaves: tuple[MembershipChange, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")


DROPOUT = None


def submit_schedule(
    behavior: PartyBehavior,
    round_open_at: float,
    think_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
) -> float | None:
    """Submission time for one party in one round, or ``None`` for a dropout.

    Both draws are always taken so the streams stay aligned whatever the outcome.
    """
    delay = behavior.think_time.sample(think_rng)
    dropped = Distribution.bernoulli(behavior.dropout_prob).sample(dropout_rng) == 1.0
    if dropped:
        return DROPOUT
    return round_open_at + max(0.0, delay)


@dataclass(frozen=True)
class RoundTrace:
    """Who is expected in a round and when each of them answers.

    ``delays`` are seconds after round open (``None`` = dropout).  Joiners
    arrive ``join_at`` seconds after open; their delays count from there.
    """

    round: int
    participants: tuple[int, ...]
    delays: Mapping[int, float | None]
    joiners: tuple[int, ...] = ()
    join_at: float = 0.0
    joiner_delays: Mapping[int, float | None] = field(default_factory=dict)


@dataclass(frozen=True)
class SubmissionTrace:
    rounds: tuple[RoundTrace, ...]
    all_parties: tuple[int, ...]

    def __getitem__(self, round_no: int) -> RoundTrace:
        return self.rounds[round_no - 1]


def record_trace(
    n_parties: int,
    n_rounds: int,
    behavior: PartyBehavior,
    seed: int,
    sample_fraction: float = 1.0,
) -> SubmissionTrace:
    """Draw the whole party schedule once so every backend replays the same one.

    Joiners announced for round ``r`` submit in round ``r`` on backends that
    admit them mid-round and are regular participants from ``r + 1`` on.
    """
    if not 0 < sample_fraction <= 1:
        raise ValueError("sample_fraction must lie in (0, 1]")
    think = make_stream(seed, "party-latency")
    drop = make_stream(seed, "dropout")
    sampler = make_stream(seed, "sampling")
    active = list(range(n_parties))
    next_id = n_parties
    joins = {j.round: j for j in behavior.joins}
    leaves = {lv.round: lv for lv in behavior.leaves}
    rounds = []
    for r in range(1, n_rounds + 1):
        if r in leaves:
            k = min(leaves[r].count, len(active))
            # highest ids leave first; deterministic and keeps leaf blocks contiguous
            active = active[: len(active) - k]
        if sample_fraction < 1.0 and active:
            m = max(1, int(round(sample_fraction * len(active))))
            chosen = sorted(int(i) for i in sampler.choice(active, size=m, replace=False))
        else:
            chosen = list(active)
        delays = {}
        for pid in chosen:
            delays[pid] = submit_schedule(behavior, 0.0, think, drop)
        joiners: tuple[int, ...] = ()
        join_at = 0.0
        joiner_delays = {}
        if r in joins:
            join_at = joins[r].at
            joiners = tuple(range(next_id, next_id + joins[r].count))
            next_id += joins[r].count
            for pid in joiners:
                joiner_delays[pid] = submit_schedule(behavior, 0.0, think, drop)
        rounds.append(RoundTrace(r, tuple(chosen), delays, joiners, join_at, joiner_delays))
        active.extend(joiners)
    return SubmissionTrace(tuple(rounds), tuple(range(next_id)))


def weighted_optimum(tasks: Sequence[SyntheticTask]) -> np.ndarray:
    n = np.array([t.sample_count for t in tasks], dtype=np.float64)
    c = np.stack([t.optimum for t in tasks])
    return (n[:, None] * c).sum(axis=0) / n.sum()


def convergence_check(history: Sequence[GlobalModel], tasks: Sequence[SyntheticTask]) -> float:
    """Distance from the last model to the sample-weighted mean of party optima."""
    if not history:
        raise ValueError("empty model history")
    return float(np.linalg.norm(history[-1].weights - weighted_optimum(tasks)))
