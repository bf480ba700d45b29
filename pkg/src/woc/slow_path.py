"""Leader-coordinated node-weighted commit with FIFO serialization."""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional

from .protocol import MessageKind, Operation, ProtocolMessage, conflicts
from .weights import WeightVector, consensus_threshold

log = logging.getLogger(__name__)

SLOW_RETRY_LIMIT = 3


class SlowState(enum.Enum):
    COLLECTING = "collecting"
    COMMITTED = "committed"
    FAILED = "failed"


@dataclass
class SlowAttempt:
    attempt_id: int
    batch: tuple
    priority: WeightVector
    threshold: float
    priority_sum: float
    leader: Hashable
    propose_time: float
    deadline: float
    accepted_from: set = field(default_factory=set)
    state: SlowState = SlowState.COLLECTING
    epoch: int = 0

    @property
    def quorum(self) -> frozenset:
        return frozenset(self.accepted_from | {self.leader})


@dataclass
class LeaderState:
    leader_id: Hashable
    batch_size: int = 1
    conflict_aware: bool = True
    retry_limit: int = SLOW_RETRY_LIMIT
    pending: deque = field(default_factory=deque)
    queued: set = field(default_factory=set)
    guard: bool = False
    attempt: Optional[SlowAttempt] = None
    attempts_started: int = 0
    retries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pending)


def submit_slow(state: LeaderState, op: Operation, is_committed: Callable = lambda op_id: False) -> bool:
    """Append ``op`` to the FIFO queue unless it is already known."""
    if op.op_id in state.queued or is_committed(op.op_id):
        return False
    if state.attempt is not None and state.attempt.state is SlowState.COLLECTING:
        if any(o.op_id == op.op_id for o in state.attempt.batch):
            return False
    state.pending.append(op)
    state.queued.add(op.op_id)
    return True


def next_batch(state: LeaderState, fast_busy: Callable[[Operation], bool] = lambda op: False) -> tuple:
    """Pop the next batch off the queue.

    Conflict-aware batching never puts two conflicting operations in one
    batch and holds back any object that has a fast-path operation in
    flight; a held-back object blocks everything queued behind it on that
    object so per-object FIFO order survives. Without conflict awareness
    the head of the queue is taken as is.
    """
    if state.guard or not state.pending:
        return ()
    if not state.conflict_aware:
        batch = tuple(state.pending.popleft() for _ in range(min(state.batch_size, len(state.pending))))
    else:
        chosen, rest = [], deque()
        held: dict = {}
        for op in state.pending:
            if len(chosen) >= state.batch_size:
                rest.append(op)
                continue
            blockers = held.get(op.object, ())
            if any(conflicts(op, b) for b in blockers) or fast_busy(op):
                held.setdefault(op.object, []).append(op)
                rest.append(op)
                continue
            chosen.append(op)
            held.setdefault(op.object, []).append(op)
        state.pending = rest
        batch = tuple(chosen)
    for op in batch:
        state.queued.discard(op.op_id)
    return batch


def leader_propose(state: LeaderState, batch: tuple, priority: WeightVector, now: float, timeout: float,
                   epoch: int = 0) -> SlowAttempt:
    assert not state.guard, "guard already held"
    assert batch, "empty batch"
    state.guard = True
    state.attempts_started += 1
    attempt = SlowAttempt(
        attempt_id=state.attempts_started,
        batch=batch,
        priority=priority,
        threshold=consensus_threshold(priority).value,
        priority_sum=priority.weight_of(state.leader_id),
        leader=state.leader_id,
        propose_time=now,
        deadline=now + timeout,
        epoch=epoch,
    )
    state.attempt = attempt
    if attempt.priority_sum >= attempt.threshold:
        attempt.state = SlowState.COMMITTED
    return attempt


def propose_message(attempt: SlowAttempt) -> ProtocolMessage:
    return ProtocolMessage(
        MessageKind.SLOW_PROPOSE,
        attempt.leader,
        batch=attempt.batch,
        priority=attempt.priority,
        attempt=attempt.attempt_id,
    )


def on_slow_accept(state: LeaderState, attempt_id: int, sender) -> bool:
    """Count an accept; True on the transition to Committed."""
    attempt = state.attempt
    if attempt is None or attempt.attempt_id != attempt_id or attempt.state is not SlowState.COLLECTING:
        log.debug("late slow accept %s from %s ignored", attempt_id, sender)
        return False
    if sender in attempt.accepted_from or sender == attempt.leader:
        return False
    attempt.accepted_from.add(sender)
    attempt.priority_sum += attempt.priority.weight_of(sender)
    if attempt.priority_sum >= attempt.threshold:
        attempt.state = SlowState.COMMITTED
        return True
    return False


def release(state: LeaderState) -> None:
    state.guard = False
    if state.attempt is not None:
        for op in state.attempt.batch:
            state.retries.pop(op.op_id, None)
    state.attempt = None


def on_slow_timeout(state: LeaderState, attempt_id: int, now: float):
    """Fail a stalled attempt, requeue what may retry.

    Returns ``(requeued, failed)`` operation lists, or ``None`` when the
    timer is stale.
    """
    attempt = state.attempt
    if attempt is None or attempt.attempt_id != attempt_id or attempt.state is not SlowState.COLLECTING:
        return None
    if now < attempt.deadline:
        return None
    attempt.state = SlowState.FAILED
    state.guard = False
    state.attempt = None
    requeued, failed = [], []
    for op in attempt.batch:
        n = state.retries.get(op.op_id, 0) + 1
        if n <= state.retry_limit:
            state.retries[op.op_id] = n
            requeued.append(op)
        else:
            state.retries.pop(op.op_id, None)
            failed.append(op)
    for op in reversed(requeued):
        state.pending.appendleft(op)
        state.queued.add(op.op_id)
    return requeued, failed
