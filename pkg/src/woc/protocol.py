"""Protocol vocabulary and the object manager.

The object manager classifies objects, tracks in-flight operations, routes
new operations to the fast or slow path, hands out per-object commit
indices and keeps the commit audit trail.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Optional

from .weights import WeightVector, consensus_threshold, rank_and_assign

EWMA_ALPHA = 0.2
RERANK_EVERY = 100


class ObjectClass(enum.Enum):
    INDEPENDENT = "independent"
    COMMON = "common"
    HOT = "hot"


class Path(enum.Enum):
    FAST = "fast"
    SLOW = "slow"


class OpKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class MessageKind(enum.Enum):
    FAST_PROPOSE = "FAST_PROPOSE"
    FAST_ACCEPT = "FAST_ACCEPT"
    CONFLICT = "CONFLICT"
    FAST_COMMIT = "FAST_COMMIT"
    SLOW_PROPOSE = "SLOW_PROPOSE"
    SLOW_ACCEPT = "SLOW_ACCEPT"
    SLOW_COMMIT = "SLOW_COMMIT"


PRIORITY_KINDS = frozenset({MessageKind.SLOW_PROPOSE, MessageKind.SLOW_ACCEPT})


@dataclass(frozen=True)
class Operation:
    op_id: tuple  # (client id, sequence number)
    object: Hashable
    kind: OpKind = OpKind.WRITE
    payload_size: int = 512
    submit_time: float = 0.0
    coordinator: Optional[Hashable] = None

    @property
    def is_read(self) -> bool:
        return self.kind is OpKind.READ


def conflicts(a: Operation, b: Operation) -> bool:
    """Same-object operations conflict unless both are reads."""
    return a.object == b.object and not (a.is_read and b.is_read)


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: Hashable
    op: Optional[Operation] = None
    batch: tuple = ()
    priority: Optional[WeightVector] = None
    attempt: int = 0
    indices: tuple = ()
    quorum: frozenset = frozenset()

    def __post_init__(self):
        if (self.priority is not None) != (self.kind in PRIORITY_KINDS):
            raise ValueError(f"{self.kind.value} priority field mismatch")

    @property
    def ops(self) -> tuple:
        return (self.op,) if self.op is not None else self.batch


@dataclass
class ObjectStats:
    op_count: int = 0
    conflict_count: int = 0
    window_clients: set = field(default_factory=set)
    window_ops: int = 0
    last_window_reset: float = 0.0

    @property
    def distinct_clients(self) -> int:
        return len(self.window_clients)

    @property
    def conflict_rate(self) -> float:
        return self.conflict_count / self.op_count if self.op_count else 0.0


@dataclass(frozen=True)
class ClassificationConfig:
    independent_max_conflict: float = 0.05
    hot_min_conflict: float = 0.50
    independent_max_clients: int = 1
    window_ops: int = 1000
    window_ms: float = 1000.0


@dataclass(frozen=True)
class CommitRecord:
    op_id: tuple
    object: Hashable
    path: Path
    quorum_members: frozenset
    accumulated_weight: float
    threshold_used: float
    commit_time: float
    commit_index: int
    kind: OpKind = OpKind.WRITE
    submit_time: float = 0.0
    epoch: int = 0  # version of the weight vector the quorum was counted under

    def __post_init__(self):
        assert self.quorum_members, "empty quorum"
        assert self.accumulated_weight >= self.threshold_used, (
            f"{self.op_id}: weight {self.accumulated_weight} below {self.threshold_used}"
        )


def classify(stats: ObjectStats, cfg: ClassificationConfig = ClassificationConfig()) -> ObjectClass:
    if stats.op_count == 0:
        return ObjectClass.INDEPENDENT
    rate = stats.conflict_rate
    if rate >= cfg.hot_min_conflict:
        return ObjectClass.HOT
    if rate <= cfg.independent_max_conflict and stats.distinct_clients <= cfg.independent_max_clients:
        return ObjectClass.INDEPENDENT
    return ObjectClass.COMMON


@dataclass
class InflightEntry:
    op: Operation
    path: Path
    owner: Hashable


class InflightTable:
    """Active operations keyed by object."""

    def __init__(self):
        self._by_object: dict = {}
        self._by_id: dict = {}

    def __len__(self):
        return len(self._by_id)

    def __contains__(self, op_id) -> bool:
        return op_id in self._by_id

    def register(self, op: Operation, path: Path = Path.FAST, owner=None) -> None:
        assert op.op_id not in self._by_id, f"double register of {op.op_id}"
        entry = InflightEntry(op, path, owner)
        self._by_id[op.op_id] = entry
        self._by_object.setdefault(op.object, {})[op.op_id] = entry

    def clear(self, op: Operation) -> InflightEntry:
        assert op.op_id in self._by_id, f"clear of unregistered {op.op_id}"
        entry = self._by_id.pop(op.op_id)
        bucket = self._by_object[op.object]
        del bucket[op.op_id]
        if not bucket:
            del self._by_object[op.object]
        return entry

    def get(self, op_id) -> Optional[InflightEntry]:
        return self._by_id.get(op_id)

    def on_object(self, obj) -> list:
        return list(self._by_object.get(obj, {}).values())

    def conflicting(self, op: Operation, path: Optional[Path] = None) -> list:
        return [
            e for e in self._by_object.get(op.object, {}).values()
            if e.op.op_id != op.op_id and conflicts(e.op, op)
            and (path is None or e.path is path)
        ]

    def has_conflict(self, op: Operation, path: Optional[Path] = None) -> bool:
        for e in self._by_object.get(op.object, {}).values():
            if e.op.op_id != op.op_id and conflicts(e.op, op) and (path is None or e.path is path):
                return True
        return False


def route(op: Operation, cls: ObjectClass, inflight: InflightTable) -> Path:
    if cls is ObjectClass.INDEPENDENT and not inflight.has_conflict(op):
        return Path.FAST
    return Path.SLOW


class LatencyTracker:
    """Exponentially weighted response-time averages, seeded by the first sample."""

    def __init__(self, alpha: float = EWMA_ALPHA):
        self.alpha = alpha
        self.values: dict = {}

    def record(self, key, latency_ms: float) -> float:
        if not latency_ms > 0:
            raise ValueError(f"latency must be positive, got {latency_ms}")
        prev = self.values.get(key)
        value = latency_ms if prev is None else self.alpha * latency_ms + (1 - self.alpha) * prev
        self.values[key] = value
        return value

    def get(self, key, default=None):
        return self.values.get(key, default)


class ObjectManager:
    """Run-wide authority for classification, in-flight state and commit order."""

    def __init__(
        self,
        replicas: Iterable,
        ratio_for_class: Callable[[ObjectClass], float],
        node_ratio: float,
        prior_latency: Mapping,
        leader=None,
        pinned: Optional[Callable[[Hashable], Optional[ObjectClass]]] = None,
        adaptive: bool = False,
        class_cfg: ClassificationConfig = ClassificationConfig(),
        rerank_every: int = RERANK_EVERY,
        alpha: float = EWMA_ALPHA,
    ):
        self.replicas = tuple(replicas)
        self.ratio_for_class = ratio_for_class
        self.node_ratio = node_ratio
        self.prior_latency = dict(prior_latency)
        self.pinned = pinned
        self.adaptive = adaptive
        self.class_cfg = class_cfg
        self.rerank_every = rerank_every

        self.inflight = InflightTable()
        self.stats: dict = {}
        self.object_latency = LatencyTracker(alpha)
        self.replica_latency = LatencyTracker(alpha)
        self.follower_latency = LatencyTracker(alpha)
        self._object_weights: dict = {}
        self._commits_since_rank: dict = {}
        self._object_epoch: dict = {}
        self._next_index: dict = {}
        self.records: list = []
        self.committed: dict = {}
        self.routed_class: dict = {}
        self.failed: set = set()

        self.node_weights = rank_and_assign(self.prior_latency, node_ratio)
        self.leader = leader if leader is not None else self.node_weights.rank_to_replica[0]
        self._slow_commits_since_rank = 0
        self.node_rerank_count = 0

    # classification and routing

    def class_of(self, obj, now: float = 0.0) -> ObjectClass:
        if not self.adaptive and self.pinned is not None:
            cls = self.pinned(obj)
            if cls is not None:
                return cls
        return classify(self.stats.get(obj, ObjectStats()), self.class_cfg)

    def observe(self, op: Operation, now: float) -> bool:
        st = self.stats.setdefault(op.object, ObjectStats(last_window_reset=now))
        cfg = self.class_cfg
        if st.window_ops >= cfg.window_ops or now - st.last_window_reset >= cfg.window_ms:
            st.window_clients = set()
            st.window_ops = 0
            st.last_window_reset = now
        conflicted = self.inflight.has_conflict(op)
        st.op_count += 1
        st.window_ops += 1
        if conflicted:
            st.conflict_count += 1
        st.window_clients.add(op.op_id[0])
        return conflicted

    def route(self, op: Operation, now: float) -> Path:
        cls = self.class_of(op.object, now)
        self.observe(op, now)
        self.routed_class.setdefault(op.op_id, cls)
        return route(op, cls, self.inflight)

    # in-flight bookkeeping

    def register(self, op: Operation, path: Path, owner) -> None:
        self.inflight.register(op, path, owner)

    def entry(self, op_id) -> Optional[InflightEntry]:
        return self.inflight.get(op_id)

    def mark_slow(self, op_id, owner) -> None:
        entry = self.inflight.get(op_id)
        assert entry is not None, f"mark_slow of unregistered {op_id}"
        entry.path = Path.SLOW
        entry.owner = owner

    def fast_conflict(self, op: Operation) -> bool:
        return self.inflight.has_conflict(op, Path.FAST)

    def fail(self, op: Operation) -> None:
        if op.op_id in self.inflight:
            self.inflight.clear(op)
        self.failed.add(op.op_id)

    # weights

    def record_response(self, replica, obj, latency_ms: float) -> None:
        self.object_latency.record((obj, replica), latency_ms)
        self.replica_latency.record(replica, latency_ms)

    def _object_latency_map(self, obj) -> dict:
        out = {}
        for r in self.replicas:
            lat = self.object_latency.get((obj, r))
            if lat is None:
                lat = self.replica_latency.get(r, self.prior_latency[r])
            out[r] = lat
        return out

    def object_weights(self, obj) -> WeightVector:
        wv = self._object_weights.get(obj)
        if wv is None or self._commits_since_rank.get(obj, 0) >= self.rerank_every:
            ratio = self.ratio_for_class(self.class_of(obj))
            wv = rank_and_assign(self._object_latency_map(obj), ratio)
            self._object_weights[obj] = wv
            self._commits_since_rank[obj] = 0
            self._object_epoch[obj] = self._object_epoch.get(obj, -1) + 1
        return wv

    def object_epoch(self, obj) -> int:
        return self._object_epoch.get(obj, 0)

    def record_follower_response(self, replica, latency_ms: float) -> None:
        self.follower_latency.record(replica, latency_ms)

    def update_priorities(self) -> None:
        """Re-rank node weights from follower latencies once per window."""
        if self._slow_commits_since_rank < self.rerank_every:
            return
        self._slow_commits_since_rank = 0
        lat = {}
        floor = min(self.prior_latency.values())
        for r in self.replicas:
            if r == self.leader:
                continue
            lat[r] = self.follower_latency.get(r, self.prior_latency[r])
            floor = min(floor, lat[r])
        # The leader is its own fastest responder.
        lat[self.leader] = floor / 2
        self.node_weights = rank_and_assign(lat, self.node_ratio)
        self.node_rerank_count += 1

    # commits

    def is_committed(self, op_id) -> bool:
        return op_id in self.committed

    def commit(self, op: Operation, path: Path, quorum, weight: float, threshold: float, now: float,
               epoch: int = 0) -> CommitRecord:
        assert op.op_id not in self.committed, f"{op.op_id} committed twice"
        index = self._next_index.get(op.object, 0) + 1
        self._next_index[op.object] = index
        rec = CommitRecord(
            op_id=op.op_id,
            object=op.object,
            path=path,
            quorum_members=frozenset(quorum),
            accumulated_weight=weight,
            threshold_used=threshold,
            commit_time=now,
            commit_index=index,
            kind=op.kind,
            submit_time=op.submit_time,
            epoch=epoch,
        )
        self.records.append(rec)
        self.committed[op.op_id] = rec
        if op.op_id in self.inflight:
            self.inflight.clear(op)
        self.failed.discard(op.op_id)
        self._commits_since_rank[op.object] = self._commits_since_rank.get(op.object, 0) + 1
        if path is Path.SLOW:
            self._slow_commits_since_rank += 1
        return rec

    def node_threshold(self) -> float:
        return consensus_threshold(self.node_weights).value
