"""Server-side aggregation math for generalized FedAvg.

The weighted sum ``S = sum(n_i * delta_i)`` together with ``N = sum(n_i)``
forms a commutative monoid under elementwise addition.  That is what lets a
round be reduced by a single aggregator, by a fixed k-ary tree, or by
ephemeral functions merging partial results in whatever order they land:
leaves build :class:`PartialAggregate` values from raw updates, intermediates
:func:`merge` them, and the root :func:`finalize` divides by ``N`` and takes
one server optimizer step.

Floating-point addition is only approximately associative, so the reference
result is the ascending-``update_id`` fold; other orders agree with it to a
relative 1e-9.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class FusionError(ValueError):
    """Invalid input to an aggregation operation."""


class DoubleCountError(FusionError):
    """Two partial aggregates share a contributor (exactly-once violation)."""


def as_weights(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Copy ``values`` into a read-only float64 vector, rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise FusionError("weight vector has non-finite entries")
    arr.flags.writeable = False
    return arr


def update_id_for(round_no: int, party_id: int) -> str:
    # zero padding keeps lexicographic order equal to numeric party order
    return f"r{round_no}-p{party_id:07d}"


@dataclass(frozen=True)
class ModelUpdate:
    party_id: int
    round: int
    delta: np.ndarray
    sample_count: int
    update_id: str = ""
    submitted_at: float = 0.0

    def __post_init__(self) -> None:
        if self.round < 1:
            raise FusionError(f"round must be >= 1, got {self.round}")
        if self.sample_count < 1:
            raise FusionError(f"sample_count must be >= 1, got {self.sample_count}")
        object.__setattr__(self, "delta", as_weights(self.delta))
        if not self.update_id:
            object.__setattr__(self, "update_id", update_id_for(self.round, self.party_id))

    @property
    def dimension(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class PartialAggregate:
    weighted_sum: np.ndarray
    total_samples: int
    contributors: frozenset[str]
    round: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "weighted_sum", as_weights(self.weighted_sum))
        object.__setattr__(self, "contributors", frozenset(self.contributors))
        empty = not self.contributors
        if empty != (self.total_samples == 0):
            raise FusionError("contributors must be empty exactly when total_samples is 0")
        if empty and np.any(self.weighted_sum != 0.0):
            raise FusionError("empty partial aggregate must carry the zero vector")
        if self.total_samples < 0:
            raise FusionError("total_samples must be non-negative")

    @classmethod
    def empty(cls, round_no: int, dimension: int) -> PartialAggregate:
        """The identity element for :func:`merge`."""
        return cls(np.zeros(dimension), 0, frozenset(), round_no)

    @property
    def dimension(self) -> int:
        return self.weighted_sum.shape[0]

    @property
    def is_empty(self) -> bool:
        return not self.contributors


@dataclass(frozen=True)
class GlobalModel:
    round: int
    weights: np.ndarray
    learning_rate: float = 1.0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise FusionError("server learning rate must be positive")
        object.__setattr__(self, "weights", as_weights(self.weights))

    @property
    def dimension(self) -> int:
        return self.weights.shape[0]


class FusionKind(str, enum.Enum):
    FEDAVG = "FedAvg"
    FEDSGD = "FedSGD"
    FEDPROX = "FedProx"


@dataclass(frozen=True)
class FusionAlgorithm:
    """Client-side flavour of the round.

    All three kinds share the same server-side fusion (sample-weighted mean
    of deltas); they differ in how parties produce their deltas.
    """

    kind: FusionKind = FusionKind.FEDAVG
    prox_mu: float = 0.0
    local_epochs_tau: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FusionKind(self.kind))
        if self.local_epochs_tau < 1:
            raise FusionError("local_epochs_tau must be >= 1")
        if self.prox_mu < 0:
            raise FusionError("prox_mu must be non-negative")
        if self.kind is FusionKind.FEDSGD and self.local_epochs_tau != 1:
            raise FusionError("FedSGD requires local_epochs_tau == 1")
        if self.kind is FusionKind.FEDPROX and not self.prox_mu > 0:
            raise FusionError("FedProx requires prox_mu > 0")

    @classmethod
    def fedsgd(cls) -> FusionAlgorithm:
        return cls(FusionKind.FEDSGD, 0.0, 1)

    @classmethod
    def fedavg(cls, tau: int = 1) -> FusionAlgorithm:
        return cls(FusionKind.FEDAVG, 0.0, tau)

    @classmethod
    def fedprox(cls, mu: float = 0.1, tau: int = 1) -> FusionAlgorithm:
        return cls(FusionKind.FEDPROX, mu, tau)


def leaf_aggregate(updates: Iterable[ModelUpdate]) -> PartialAggregate:
    """Fuse raw updates into ``(sum n_i * delta_i, sum n_i)``.

    Summation runs in ascending ``update_id`` order so the result does not
    depend on arrival order.
    """
    ordered = sorted(updates, key=lambda u: u.update_id)
    if not ordered:
        raise FusionError("leaf_aggregate needs at least one update")
    round_no = ordered[0].round
    dim = ordered[0].dimension
    seen: set[str] = set()
    acc = np.zeros(dim)
    total = 0
    for u in ordered:
        if u.round != round_no:
            raise FusionError(f"mixed rounds {round_no} and {u.round}")
        if u.dimension != dim:
            raise FusionError(f"dimension mismatch {dim} vs {u.dimension}")
        if u.update_id in seen:
            raise FusionError(f"duplicate update_id {u.update_id}")
        seen.add(u.update_id)
        acc += u.sample_count * u.delta
        total += u.sample_count
    return PartialAggregate(acc, total, frozenset(seen), round_no)


def merge(a: PartialAggregate, b: PartialAggregate) -> PartialAggregate:
    if a.round != b.round:
        raise FusionError(f"cannot merge rounds {a.round} and {b.round}")
    if a.dimension != b.dimension:
        raise FusionError(f"dimension mismatch {a.dimension} vs {b.dimension}")
    overlap = a.contributors & b.contributors
    if overlap:
        raise DoubleCountError(f"{len(overlap)} contributor(s) counted twice, e.g. {min(overlap)}")
    if b.is_empty:
        return a
    if a.is_empty:
        return b
    return PartialAggregate(
        a.weighted_sum + b.weighted_sum,
        a.total_samples + b.total_samples,
        a.contributors | b.contributors,
        a.round,
    )


def merge_all(partials: Sequence[PartialAggregate]) -> PartialAggregate:
    """Left fold of :func:`merge` in the given order."""
    if not partials:
        raise FusionError("merge_all needs at least one partial")
    acc = partials[0]
    for p in partials[1:]:
        acc = merge(acc, p)
    return acc


def server_sgd(m: np.ndarray, pseudo_gradient: np.ndarray, eta: float) -> np.ndarray:
    """Plain SGD step ``m - eta * g``."""
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(pseudo_gradient, dtype=np.float64)
    if m.shape != g.shape:
        raise FusionError(f"dimension mismatch {m.shape} vs {g.shape}")
    if not eta > 0:
        raise FusionError("eta must be positive")
    out = m - eta * g
    if not np.all(np.isfinite(out)):
        raise FusionError("server step produced non-finite weights")
    return out


def mean_delta(partial: PartialAggregate) -> np.ndarray:
    if partial.total_samples == 0:
        raise FusionError("cannot finalize an empty round")
    return partial.weighted_sum / partial.total_samples


def finalize(partial: PartialAggregate, model: GlobalModel) -> GlobalModel:
    """Close a round: ``m' = m + eta * S / N``."""
    if partial.round != model.round:
        raise FusionError(f"partial is for round {partial.round}, model is at {model.round}")
    delta = mean_delta(partial)
    weights = server_sgd(model.weights, -delta, model.learning_rate)
    return GlobalModel(model.round + 1, weights, model.learning_rate)


def canonical_result(updates: Iterable[ModelUpdate], model: GlobalModel) -> GlobalModel:
    """Reference next model: ascending-update_id fold, then finalize."""
    return finalize(leaf_aggregate(updates), model)


def relative_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|)`` (0 where both are 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FusionError(f"shape mismatch {a.shape} vs {b.shape}")
    scale = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    return float(rel.max(initial=0.0))
