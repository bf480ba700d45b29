"""Replica state machine wiring the fast path, slow path and commit application.

A replica is driven one envelope at a time by the simulator. It never
touches another replica's state; the only shared authority is the object
manager, reached through ``cluster.om``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Hashable

from . import fast_path, slow_path
from .cabinet import baseline_leader, baseline_route
from .protocol import InflightTable, MessageKind, Operation, Path, ProtocolMessage
from .slow_path import LeaderState

log = logging.getLogger(__name__)

WOC = "woc"
CABINET = "cabinet"


@dataclass(frozen=True)
class ClientRequest:
    client: Hashable
    ops: tuple


@dataclass(frozen=True)
class ClientReply:
    op_id: tuple
    ok: bool = True


@dataclass(frozen=True)
class Forward:
    """Slow-path hand-off from a coordinator to the leader."""
    sender: Hashable
    op: Operation


class Replica:
    def __init__(self, rid, cluster, protocol: str, leader_id, fast_timeout: float,
                 slow_timeout: float, batch_size: int, slow_retry_limit: int = slow_path.SLOW_RETRY_LIMIT):
        self.rid = rid
        self.cluster = cluster
        self.protocol = protocol
        self.leader_id = leader_id
        self.fast_timeout = fast_timeout
        self.slow_timeout = slow_timeout

        self.table = InflightTable()
        self.verdicts: dict = {}
        self.fast: dict = {}
        self.probes: dict = {}  # op_id -> [start, object, replies outstanding]
        self.owed: dict = {}

        self.next_index: dict = {}
        self.buffer: dict = {}
        self.applied: set = set()
        self.log: list = []
        self.store: dict = {}

        self.leader: LeaderState | None = None
        if rid == leader_id:
            if protocol == CABINET:
                self.leader = baseline_leader(rid, batch_size)
            else:
                self.leader = LeaderState(leader_id=rid, batch_size=batch_size)
            self.leader.retry_limit = slow_retry_limit

    @property
    def om(self):
        return self.cluster.om

    def send(self, dst, item) -> None:
        self.cluster.send(self.rid, dst, item)

    def broadcast(self, item) -> None:
        for r in self.cluster.replica_ids:
            if r != self.rid:
                self.send(r, item)

    # dispatch

    def handle(self, item) -> None:
        if isinstance(item, ProtocolMessage):
            handler = self._handlers[item.kind]
            handler(self, item)
        elif isinstance(item, ClientRequest):
            for op in item.ops:
                self.on_client_op(item.client, op)
        elif isinstance(item, Forward):
            self.on_forward(item)
        else:
            raise TypeError(f"unexpected item {item!r}")

    def after_envelope(self) -> None:
        if self.leader is not None:
            self.try_propose()

    # client ingress and routing

    def on_client_op(self, client, op: Operation) -> None:
        om = self.om
        self.owed[op.op_id] = client
        if om.is_committed(op.op_id):
            self.reply(op.op_id)
            return
        entry = om.entry(op.op_id)
        if entry is not None:
            # Resubmission of a known op: wait for its commit, taking it over
            # through the slow path if its fast coordinator is gone.
            if entry.path is Path.FAST and not self.cluster.alive(entry.owner):
                om.mark_slow(op.op_id, self.leader_id)
                self.cluster.audit("fallback", op.op_id, op.object, "coordinator_lost")
                self.submit_slow(op)
            return
        if self.protocol == CABINET:
            path = baseline_route(op)
        else:
            path = om.route(op, self.cluster.now)
        if path is Path.FAST:
            self.start_fast(op)
        else:
            om.register(op, Path.SLOW, self.leader_id)
            self.submit_slow(op)

    def reply(self, op_id, ok: bool = True) -> None:
        client = self.owed.pop(op_id, None)
        if client is not None:
            self.send(client, ClientReply(op_id, ok))

    # fast path, coordinator side

    def start_fast(self, op: Operation) -> None:
        now = self.cluster.now
        self.om.register(op, Path.FAST, self.rid)
        self.table.register(op, Path.FAST, self.rid)
        weights = self.om.object_weights(op.object)
        attempt = fast_path.start_fast(op, weights, self.rid, now, self.fast_timeout,
                                       epoch=self.om.object_epoch(op.object))
        self.cluster.audit("propose", "fast", op.op_id, op.object, op.kind.value)
        if attempt.committed:
            self.commit_fast(attempt)
            return
        self.fast[op.op_id] = attempt
        self.probes[op.op_id] = [now, op.object, len(self.cluster.replica_ids) - 1]
        self.broadcast(fast_path.propose_message(attempt))
        self.cluster.timer(self.rid, self.fast_timeout, self.on_fast_timeout, op.op_id)

    def _probe(self, msg: ProtocolMessage, accepted: bool) -> None:
        # Every reply is a latency sample, including ones that arrive after
        # the attempt has ended; slow replicas would never be measured otherwise.
        probe = self.probes.get(msg.op.op_id)
        if probe is None:
            return
        latency = self.cluster.now - probe[0]
        if accepted and latency > 0:
            self.om.record_response(msg.sender, probe[1], latency)
        probe[2] -= 1
        if probe[2] <= 0:
            del self.probes[msg.op.op_id]

    def on_fast_accept(self, msg: ProtocolMessage) -> None:
        self._probe(msg, accepted=True)
        attempt = self.fast.get(msg.op.op_id)
        if attempt is None:
            return
        if fast_path.on_fast_accept(attempt, msg.sender):
            self.commit_fast(attempt)

    def on_conflict(self, msg: ProtocolMessage) -> None:
        self._probe(msg, accepted=False)
        attempt = self.fast.get(msg.op.op_id)
        if attempt is not None and fast_path.on_fast_conflict_or_timeout(attempt, self.cluster.now):
            self.fall_back(attempt, "conflict")

    def on_fast_timeout(self, op_id) -> None:
        attempt = self.fast.get(op_id)
        if attempt is not None and fast_path.on_fast_conflict_or_timeout(attempt, self.cluster.now, conflict=False):
            self.fall_back(attempt, "timeout")

    def fall_back(self, attempt, reason: str) -> None:
        op = attempt.op
        del self.fast[op.op_id]
        self.om.mark_slow(op.op_id, self.leader_id)
        self.cluster.audit("fallback", op.op_id, op.object, reason)
        self.submit_slow(op)

    def commit_fast(self, attempt) -> None:
        op = attempt.op
        self.fast.pop(op.op_id, None)
        rec = self.om.commit(op, Path.FAST, attempt.quorum, attempt.accumulated,
                             attempt.threshold.value, self.cluster.now, attempt.epoch)
        self.cluster.audit("commit", rec)
        self.broadcast(ProtocolMessage(MessageKind.FAST_COMMIT, self.rid, op=op,
                                       indices=(rec.commit_index,), quorum=rec.quorum_members))
        self.observe_commit(op, rec.commit_index)

    # fast path, replica side

    def on_fast_propose(self, msg: ProtocolMessage) -> None:
        if msg.op.op_id in self.applied:
            # Proposal overtaken by the op's own slow commit; never re-register.
            self.send(msg.sender, ProtocolMessage(MessageKind.CONFLICT, self.rid, op=msg.op))
            return
        self.send(msg.sender, fast_path.on_fast_propose(self.rid, self.table, self.verdicts, msg))

    def on_fast_commit(self, msg: ProtocolMessage) -> None:
        self.observe_commit(msg.op, msg.indices[0])

    # slow path

    def submit_slow(self, op: Operation) -> None:
        if self.leader is not None:
            slow_path.submit_slow(self.leader, op, self.om.is_committed)
        else:
            self.send(self.leader_id, Forward(self.rid, op))

    def on_forward(self, fwd: Forward) -> None:
        if self.leader is None:
            self.send(self.leader_id, fwd)
            return
        slow_path.submit_slow(self.leader, fwd.op, self.om.is_committed)

    def try_propose(self) -> None:
        state = self.leader
        if state.guard or not state.pending:
            return
        om = self.om
        batch = slow_path.next_batch(state, om.fast_conflict)
        if not batch:
            return
        now = self.cluster.now
        attempt = slow_path.leader_propose(state, batch, om.node_weights, now, self.slow_timeout,
                                           epoch=om.node_rerank_count)
        for op in batch:
            if op.op_id not in self.table:
                self.table.register(op, Path.SLOW, self.rid)
            self.cluster.audit("propose", "slow", op.op_id, op.object, op.kind.value)
        if attempt.state is slow_path.SlowState.COMMITTED:
            self.commit_slow(attempt)
            return
        self.broadcast(slow_path.propose_message(attempt))
        self.cluster.timer(self.rid, self.slow_timeout, self.on_slow_timeout, attempt.attempt_id)

    def on_slow_propose(self, msg: ProtocolMessage) -> None:
        for op in msg.batch:
            if op.op_id not in self.table and op.op_id not in self.applied:
                self.table.register(op, Path.SLOW, msg.sender)
        self.send(msg.sender, ProtocolMessage(MessageKind.SLOW_ACCEPT, self.rid,
                                              priority=msg.priority, attempt=msg.attempt))

    def on_slow_accept(self, msg: ProtocolMessage) -> None:
        state = self.leader
        if state is None or state.attempt is None:
            return
        attempt = state.attempt
        if attempt.attempt_id == msg.attempt:
            latency = self.cluster.now - attempt.propose_time
            if latency > 0:
                self.om.record_follower_response(msg.sender, latency)
        if slow_path.on_slow_accept(state, msg.attempt, msg.sender):
            self.commit_slow(attempt)

    def commit_slow(self, attempt) -> None:
        om = self.om
        now = self.cluster.now
        indices = []
        for op in attempt.batch:
            rec = om.commit(op, Path.SLOW, attempt.quorum, attempt.priority_sum, attempt.threshold, now,
                            attempt.epoch)
            self.cluster.audit("commit", rec)
            indices.append(rec.commit_index)
        self.broadcast(ProtocolMessage(MessageKind.SLOW_COMMIT, self.rid, batch=attempt.batch,
                                       indices=tuple(indices), quorum=attempt.quorum))
        slow_path.release(self.leader)
        om.update_priorities()
        for op, idx in zip(attempt.batch, indices):
            self.observe_commit(op, idx)

    def on_slow_timeout(self, attempt_id) -> None:
        out = slow_path.on_slow_timeout(self.leader, attempt_id, self.cluster.now)
        if out is None:
            return
        requeued, failed = out
        for op in requeued:
            self.cluster.audit("slow_retry", op.op_id, op.object)
        for op in failed:
            self.om.fail(op)
            self.cluster.audit("failed", op.op_id, op.object)
            self.reply(op.op_id, ok=False)

    def on_slow_commit(self, msg: ProtocolMessage) -> None:
        for op, idx in zip(msg.batch, msg.indices):
            self.observe_commit(op, idx)

    # commit application

    def observe_commit(self, op: Operation, index: int) -> None:
        if op.op_id in self.table:
            self.table.clear(op)
        self.verdicts.pop(op.op_id, None)
        self.reply(op.op_id)
        if op.op_id in self.applied:
            return
        buf = self.buffer.setdefault(op.object, {})
        buf[index] = op
        nxt = self.next_index.get(op.object, 0) + 1
        while nxt in buf:
            ready = buf.pop(nxt)
            self.apply(ready, nxt)
            nxt += 1
        self.next_index[op.object] = nxt - 1
        if not buf:
            del self.buffer[op.object]

    def apply(self, op: Operation, index: int) -> None:
        self.applied.add(op.op_id)
        self.log.append((op.object, op.op_id, index))
        if not op.is_read:
            self.store[op.object] = op.op_id
        self.cluster.audit("apply", self.rid, op.object, op.op_id, index)

    _handlers = {
        MessageKind.FAST_PROPOSE: on_fast_propose,
        MessageKind.FAST_ACCEPT: on_fast_accept,
        MessageKind.CONFLICT: on_conflict,
        MessageKind.FAST_COMMIT: on_fast_commit,
        MessageKind.SLOW_PROPOSE: on_slow_propose,
        MessageKind.SLOW_ACCEPT: on_slow_accept,
        MessageKind.SLOW_COMMIT: on_slow_commit,
    }
