"""Geometric weight vectors, consensus thresholds and quorum invariants.

The same machinery serves both per-object weights (fast path) and global
node weights (slow path); only the latency statistics fed into
:func:`rank_and_assign` differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

MIN_RATIO = 1.0
MAX_RATIO = 2.0


class WeightDomainError(ValueError):
    """Raised for replica counts, ratios or fault thresholds outside their domain."""


@dataclass(frozen=True)
class WeightVector:
    weights: tuple
    rank_to_replica: tuple = ()
    ratio: Optional[float] = None
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if not self.rank_to_replica:
            object.__setattr__(self, "rank_to_replica", tuple(range(len(weights))))
        else:
            object.__setattr__(self, "rank_to_replica", tuple(self.rank_to_replica))
        if len(weights) < 3:
            raise WeightDomainError(f"need at least 3 replicas, got {len(weights)}")
        if len(self.rank_to_replica) != len(weights):
            raise WeightDomainError("rank_to_replica length differs from weights")
        if len(set(self.rank_to_replica)) != len(weights):
            raise WeightDomainError("duplicate replica in rank_to_replica")
        if any(not w > 0 for w in weights):
            raise WeightDomainError("weights must be strictly positive")
        if any(a < b for a, b in zip(weights, weights[1:])):
            raise WeightDomainError("weights must be non-increasing by rank")
        object.__setattr__(
            self, "_index", dict(zip(self.rank_to_replica, weights))
        )

    def __len__(self):
        return len(self.weights)

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def total(self) -> float:
        return sum(self.weights)

    def weight_of(self, replica) -> float:
        return self._index[replica]

    def by_replica(self) -> dict:
        return dict(self._index)

    def weight_sum(self, replicas) -> float:
        return sum(self._index[r] for r in replicas)

    def top(self, k: int) -> tuple:
        """Replica ids of the ``k`` highest-weighted replicas."""
        return self.rank_to_replica[:k]


@dataclass(frozen=True)
class ConsensusThreshold:
    value: float

    def met_by(self, weight: float) -> bool:
        return weight >= self.value


@dataclass(frozen=True)
class InvariantReport:
    i1_holds: bool
    i2_holds: bool
    top_t_plus_1_sum: float
    top_t_sum: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.i1_holds and self.i2_holds


def _check_n(n: int) -> None:
    if n < 3:
        raise WeightDomainError(f"replica count must be >= 3, got {n}")


def _check_ratio(ratio: float) -> None:
    if not MIN_RATIO <= ratio <= MAX_RATIO:
        raise WeightDomainError(
            f"ratio must lie in [{MIN_RATIO}, {MAX_RATIO}], got {ratio}"
        )


def check_fault_threshold(n: int, t: int) -> None:
    if not 1 <= t <= (n - 1) // 2:
        raise WeightDomainError(f"fault threshold t={t} invalid for n={n}")


def geometric_weights(n: int, ratio: float, replicas: Sequence = ()) -> WeightVector:
    """Weights ``ratio ** (n - 1 - i)`` for ranks ``i = 0 .. n-1``, highest first."""
    _check_n(n)
    _check_ratio(ratio)
    weights = tuple(ratio ** (n - 1 - i) for i in range(n))
    return WeightVector(weights, tuple(replicas), ratio)


def consensus_threshold(wv: WeightVector) -> ConsensusThreshold:
    return ConsensusThreshold(wv.total / 2)


def check_invariants(wv: WeightVector, t: int) -> InvariantReport:
    check_fault_threshold(wv.n, t)
    threshold = consensus_threshold(wv).value
    top_t = sum(wv.weights[:t])
    top_t1 = sum(wv.weights[: t + 1])
    # Weights are sorted, so the top-t sum bounds every t-subset.
    return InvariantReport(
        i1_holds=top_t1 > threshold,
        i2_holds=top_t < threshold,
        top_t_plus_1_sum=top_t1,
        top_t_sum=top_t,
        threshold=threshold,
    )


def ratio_grid(step: float):
    if step <= 0:
        raise WeightDomainError("grid step must be positive")
    count = int(round((MAX_RATIO - MIN_RATIO) / step))
    for k in range(count + 1):
        r = round(MIN_RATIO + k * step, 12)
        if r <= MAX_RATIO:
            yield r


def feasible_ratio_interval(n: int, t: int, step: float = 0.01):
    """Smallest and largest grid ratio in [1, 2] satisfying I1 and I2.

    Returns ``None`` when no grid point qualifies.
    """
    _check_n(n)
    check_fault_threshold(n, t)
    ok = [r for r in ratio_grid(step) if check_invariants(geometric_weights(n, r), t).ok]
    if not ok:
        return None
    return ok[0], ok[-1]


def default_ratio(n: int, t: int, step: float = 0.01) -> float:
    """Midpoint of the feasible interval, snapped to the grid."""
    interval = feasible_ratio_interval(n, t, step)
    if interval is None:
        raise WeightDomainError(f"no feasible ratio for n={n}, t={t}")
    lo, hi = interval
    mid = (lo + hi) / 2
    return round(round(mid / step) * step, 12)


def rank_and_assign(latency_stats: Mapping[Hashable, float], ratio: float) -> WeightVector:
    """Rank replicas by ascending latency and hand out geometric weights.

    Ties go to the lower replica identifier.
    """
    if not latency_stats:
        raise WeightDomainError("no latency statistics")
    for replica, lat in latency_stats.items():
        if lat is None or not lat > 0 or lat == float("inf"):
            raise WeightDomainError(f"replica {replica!r} has invalid latency {lat!r}")
    order = sorted(latency_stats, key=lambda r: (latency_stats[r], r))
    return geometric_weights(len(order), ratio, order)


def quorum_masks(wv: WeightVector) -> list:
    """Bitmasks (over rank indices) of every subset meeting the threshold."""
    threshold = consensus_threshold(wv).value
    n = wv.n
    out = []
    for mask in range(1, 1 << n):
        total = sum(wv.weights[i] for i in range(n) if mask >> i & 1)
        if total >= threshold:
            out.append(mask)
    return out


def quorum_subsets(wv: WeightVector) -> list:
    replicas = wv.rank_to_replica
    return [
        frozenset(replicas[i] for i in range(wv.n) if mask >> i & 1)
        for mask in quorum_masks(wv)
    ]


def disjoint_quorum_pair(wv: WeightVector):
    """Two disjoint quorums, or ``None`` if every pair intersects.

    Supersets of a quorum are quorums, so a disjoint pair exists exactly
    when some quorum's complement is itself a quorum.
    """
    masks = set(quorum_masks(wv))
    full = (1 << wv.n) - 1
    replicas = wv.rank_to_replica
    for a in sorted(masks):
        b = full & ~a
        if b in masks:
            return (
                frozenset(replicas[k] for k in range(wv.n) if a >> k & 1),
                frozenset(replicas[k] for k in range(wv.n) if b >> k & 1),
            )
    return None
