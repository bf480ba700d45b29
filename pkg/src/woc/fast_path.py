"""Leaderless object-weighted commit for independent objects.

Coordinator side: :func:`start_fast`, :func:`on_fast_accept`,
:func:`on_fast_conflict_or_timeout`. Replica side: :func:`on_fast_propose`.
Message sending and timers are left to the caller.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Hashable

from .protocol import InflightTable, MessageKind, Operation, Path, ProtocolMessage
from .weights import ConsensusThreshold, WeightVector, consensus_threshold

log = logging.getLogger(__name__)


class FastState(enum.Enum):
    COLLECTING = "collecting"
    COMMITTED = "committed"
    FELL_BACK = "fell_back"


@dataclass
class FastAttempt:
    op: Operation
    coordinator: Hashable
    object_weights: WeightVector
    threshold: ConsensusThreshold
    accumulated: float
    start_time: float
    deadline: float
    accepted_from: set = field(default_factory=set)
    state: FastState = FastState.COLLECTING
    epoch: int = 0

    @property
    def quorum(self) -> frozenset:
        return frozenset(self.accepted_from | {self.coordinator})

    @property
    def committed(self) -> bool:
        return self.state is FastState.COMMITTED


def start_fast(op: Operation, object_weights: WeightVector, coordinator, now: float, timeout: float,
               epoch: int = 0) -> FastAttempt:
    """Open an attempt; the coordinator's own weight counts without a message."""
    attempt = FastAttempt(
        op=op,
        coordinator=coordinator,
        object_weights=object_weights,
        threshold=consensus_threshold(object_weights),
        accumulated=object_weights.weight_of(coordinator),
        start_time=now,
        deadline=now + timeout,
        epoch=epoch,
    )
    if attempt.threshold.met_by(attempt.accumulated):
        attempt.state = FastState.COMMITTED
    return attempt


def propose_message(attempt: FastAttempt) -> ProtocolMessage:
    return ProtocolMessage(MessageKind.FAST_PROPOSE, attempt.coordinator, op=attempt.op)


def on_fast_propose(replica, table: InflightTable, verdicts: dict, msg: ProtocolMessage) -> ProtocolMessage:
    """Vote on a proposal: CONFLICT if a conflicting op is in flight here.

    ``verdicts`` caches answers by op id so duplicate deliveries are answered
    identically and never register twice.
    """
    assert msg.kind is MessageKind.FAST_PROPOSE
    op = msg.op
    kind = verdicts.get(op.op_id)
    if kind is None:
        if table.has_conflict(op):
            kind = MessageKind.CONFLICT
        else:
            kind = MessageKind.FAST_ACCEPT
            if op.op_id not in table:
                table.register(op, Path.FAST, msg.sender)
        verdicts[op.op_id] = kind
    return ProtocolMessage(kind, replica, op=op)


def on_fast_accept(attempt: FastAttempt, sender) -> bool:
    """Count an accept; returns True on the transition to Committed."""
    if attempt.state is not FastState.COLLECTING:
        log.debug("late accept from %s for %s ignored", sender, attempt.op.op_id)
        return False
    if sender in attempt.accepted_from or sender == attempt.coordinator:
        return False
    attempt.accepted_from.add(sender)
    attempt.accumulated += attempt.object_weights.weight_of(sender)
    if attempt.threshold.met_by(attempt.accumulated):
        attempt.state = FastState.COMMITTED
        return True
    return False


def on_fast_conflict_or_timeout(attempt: FastAttempt, now: float, conflict: bool = True) -> bool:
    """Abandon the fast path; returns True if this call caused the fallback.

    A timeout only counts once the deadline has passed.
    """
    if attempt.state is not FastState.COLLECTING:
        return False
    if not conflict and now < attempt.deadline:
        return False
    attempt.state = FastState.FELL_BACK
    return True
