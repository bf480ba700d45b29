"""Deterministic discrete-event simulation of replicas, links and clients.

Time is in milliseconds. Every random draw comes from generators seeded
from the run seed, so a (config, seed) pair always replays the same trace.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional

from .node import CABINET, WOC, ClientReply, ClientRequest, Forward, Replica
from .protocol import ObjectClass, ObjectManager, OpKind, Operation, ProtocolMessage


class EventKind(enum.Enum):
    DELIVER = "deliver"
    PROCESS = "process"
    CLIENT_ARRIVAL = "client_arrival"
    TIMEOUT = "timeout"
    CRASH = "crash"
    RECOVER = "recover"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: object = field(compare=False, default=None)


class Livelock(RuntimeError):
    """The event loop exceeded its event budget without reaching quiescence."""


class Simulator:
    """Priority queue of events processed in (time, seq) order."""

    def __init__(self, event_budget: int = 5_000_000):
        self.now = 0.0
        self.event_budget = event_budget
        self._heap: list = []
        self._seq = 0
        self.handlers: dict = {}
        self.trace: list = []
        self.processed = 0
        self._ran = False

    def schedule(self, time: float, kind: EventKind, payload=None) -> SimEvent:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        self._seq += 1
        ev = SimEvent(time, self._seq, kind, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: Optional[float] = None) -> list:
        assert not self._ran, "run() is single-use per simulator"
        self._ran = True
        heap = self._heap
        trace = self.trace
        handlers = self.handlers
        while heap:
            if until is not None and heap[0].time > until:
                break
            ev = heapq.heappop(heap)
            self.now = ev.time
            self.processed += 1
            if self.processed > self.event_budget:
                raise Livelock(f"event budget {self.event_budget} exhausted at t={self.now:.3f}ms")
            trace.append((ev.time, ev.seq, ev.kind.value))
            handler = handlers.get(ev.kind)
            if handler is not None:
                handler(ev.payload)
        return trace


@dataclass(frozen=True)
class Link:
    base_ms: float
    jitter_ms: float = 0.0
    bandwidth: float = math.inf  # bytes per ms


def sample_delay(link: Link, rng: random.Random) -> float:
    if link.jitter_ms <= 0:
        return link.base_ms
    return link.base_ms + rng.uniform(0.0, link.jitter_ms)


@dataclass(frozen=True)
class LatencyProfile:
    """Per-replica network and CPU characteristics.

    ``access_ms[i]`` is replica ``i``'s one-way access delay; a link between
    two replicas costs the sum of their access delays. ``cpu_speed[i]``
    multiplies every processing cost on replica ``i``.
    """
    name: str
    access_ms: tuple
    cpu_speed: tuple
    jitter_frac: float = 0.2
    replica_bandwidth: float = 40_000.0
    client_access_ms: float = 0.05
    client_bandwidth: float = 8_000.0
    envelope_cost_ms: float = 0.0005
    item_cost_ms: float = 0.0002
    op_cost_ms: float = 0.0003

    @property
    def n(self) -> int:
        return len(self.access_ms)


HETERO_ACCESS_BASE_MS = 0.03
HETERO_ACCESS_SPAN = 1.35 ** 4  # slowest / fastest access delay
HETERO_CPU_SPAN = 0.4  # slowest replica pays this much extra per unit of work


def heterogeneous_profile(n: int, **overrides) -> LatencyProfile:
    """Replicas spread geometrically from a fast to a slow tier.

    The spread is fixed regardless of ``n``: adding replicas fills in the
    range rather than appending ever slower machines.
    """
    steps = [i / (n - 1) if n > 1 else 0.0 for i in range(n)]
    params = dict(
        name="heterogeneous",
        access_ms=tuple(round(HETERO_ACCESS_BASE_MS * HETERO_ACCESS_SPAN ** x, 6) for x in steps),
        cpu_speed=tuple(round(1.0 + HETERO_CPU_SPAN * x, 6) for x in steps),
    )
    params.update(overrides)
    return LatencyProfile(**params)


def uniform_profile(n: int, **overrides) -> LatencyProfile:
    params = dict(name="uniform", access_ms=(0.1,) * n, cpu_speed=(1.0,) * n)
    params.update(overrides)
    return LatencyProfile(**params)


PROFILES = {"heterogeneous": heterogeneous_profile, "uniform": uniform_profile}


def make_profile(name: str, n: int, **overrides) -> LatencyProfile:
    try:
        return PROFILES[name](n, **overrides)
    except KeyError:
        raise ValueError(f"unknown latency profile {name!r}") from None


class LinkModel:
    def __init__(self, profile: LatencyProfile):
        self.profile = profile

    def replica_link(self, a: int, b: int) -> Link:
        p = self.profile
        base = p.access_ms[a] + p.access_ms[b]
        return Link(base, base * p.jitter_frac, p.replica_bandwidth)

    def client_link(self, replica: int) -> Link:
        p = self.profile
        base = p.client_access_ms + p.access_ms[replica]
        return Link(base, base * p.jitter_frac, p.client_bandwidth)

    def p99_one_way(self) -> float:
        """99th-percentile one-way delay across replica links (nearest rank)."""
        n = self.profile.n
        samples = []
        for a in range(n):
            for b in range(n):
                if a != b:
                    link = self.replica_link(a, b)
                    samples.append(link.base_ms + 0.99 * link.jitter_ms)
        samples.sort()
        return samples[max(0, math.ceil(0.99 * len(samples)) - 1)]

    def prior_latency(self) -> dict:
        """Expected round trip from each replica to the rest, before any samples."""
        n = self.profile.n
        out = {}
        for r in range(n):
            rtts = [2 * self.replica_link(r, o).base_ms for o in range(n) if o != r]
            out[r] = sum(rtts) / len(rtts)
        return out

    def processing_cost(self, replica: int, items) -> float:
        p = self.profile
        cost = p.envelope_cost_ms
        for item in items:
            cost += p.item_cost_ms + p.op_cost_ms * _op_count(item)
        return cost * p.cpu_speed[replica]


HEADER_BYTES = 64
OP_REF_BYTES = 16


def _op_count(item) -> int:
    if isinstance(item, ProtocolMessage):
        return len(item.ops)
    if isinstance(item, ClientRequest):
        return len(item.ops)
    if isinstance(item, Forward):
        return 1
    return 0


def item_size(item) -> int:
    if isinstance(item, ClientRequest):
        return HEADER_BYTES + sum(op.payload_size for op in item.ops)
    if isinstance(item, Forward):
        return HEADER_BYTES + item.op.payload_size
    if isinstance(item, ProtocolMessage):
        if item.kind.value.endswith("PROPOSE"):
            return HEADER_BYTES + sum(op.payload_size for op in item.ops)
        return HEADER_BYTES + OP_REF_BYTES * len(item.ops)
    return HEADER_BYTES


@dataclass
class Envelope:
    src: Hashable
    dst: Hashable
    items: list


@dataclass(frozen=True)
class Workload:
    """Per-operation target mix and object pools."""
    mix: tuple = (0.90, 0.05, 0.05)  # independent, common, hot
    independent_pool: int = 5000  # per client
    common_pool: int = 32
    hot_pool: int = 4
    read_fraction: float = 0.0
    payload_bytes: int = 512


def pinned_class(obj) -> Optional[ObjectClass]:
    """Class declared by the workload generator's object naming."""
    tag = obj[0] if isinstance(obj, str) and obj else None
    return {"i": ObjectClass.INDEPENDENT, "c": ObjectClass.COMMON, "h": ObjectClass.HOT}.get(tag)


@dataclass
class _Group:
    gid: int
    ops: dict
    pending: set
    targets: dict
    tries: dict


class Client:
    """Open-loop client with a cap on in-flight groups of operations."""

    def __init__(self, cid: str, cluster: "Cluster", targets: list, workload: Workload, budget: int,
                 batch_size: int = 1, max_inflight: int = 5, rate: Optional[float] = None,
                 timeout_ms: float = 200.0, max_retries: int = 3, seed: str = "0"):
        self.cid = cid
        self.cluster = cluster
        self.targets = list(targets)
        self.workload = workload
        self.remaining = budget
        self.batch_size = batch_size
        self.max_inflight = max_inflight
        self.rate = rate
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.rng = random.Random(f"{seed}:client:{cid}")
        self.rr = 0
        self.seq = 0
        self.backlog = 0
        self.groups: dict = {}
        self.op_group: dict = {}
        self.suspected: set = set()
        self.submitted: list = []
        self.completed: dict = {}
        self.failed: set = set()
        self.max_seen_inflight = 0

    @property
    def inflight(self) -> int:
        return len(self.groups)

    def start(self, at: float) -> None:
        self.cluster.sim.schedule(at, EventKind.CLIENT_ARRIVAL, self)

    def on_arrival(self) -> None:
        if self.remaining <= 0:
            return
        if self.rate is None:
            self.backlog = math.inf
        else:
            self.backlog += 1
            gap = self.batch_size / self.rate
            self.cluster.sim.schedule(self.cluster.now + gap, EventKind.CLIENT_ARRIVAL, self)
        self.pump()

    def pump(self) -> None:
        while self.remaining > 0 and self.backlog > 0 and self.inflight < self.max_inflight:
            self.backlog -= 1
            self.send_group()

    def _next_object(self):
        w = self.workload
        x = self.rng.random()
        if x < w.mix[0]:
            return f"i{self.cid}-{self.rng.randrange(w.independent_pool)}"
        if x < w.mix[0] + w.mix[1]:
            return f"c{self.rng.randrange(w.common_pool)}"
        return f"h{self.rng.randrange(w.hot_pool)}"

    def _live_targets(self) -> list:
        live = [r for r in self.targets if r not in self.suspected]
        return live or self.targets

    def send_group(self) -> None:
        cluster = self.cluster
        now = cluster.now
        size = min(self.batch_size, self.remaining)
        self.remaining -= size
        gid = self.seq
        live = self._live_targets()
        ops, targets = {}, {}
        per_target: dict = {}
        for _ in range(size):
            self.seq += 1
            kind = OpKind.READ if self.rng.random() < self.workload.read_fraction else OpKind.WRITE
            target = live[self.rr % len(live)]
            self.rr += 1
            op = Operation((self.cid, self.seq), self._next_object(), kind,
                           self.workload.payload_bytes, now, target)
            ops[op.op_id] = op
            targets[op.op_id] = target
            per_target.setdefault(target, []).append(op)
            self.op_group[op.op_id] = gid
            self.submitted.append(op)
            cluster.audit("submit", op.op_id, op.object, op.kind.value, now)
        group = _Group(gid, ops, set(ops), targets, {k: 0 for k in ops})
        self.groups[gid] = group
        self.max_seen_inflight = max(self.max_seen_inflight, self.inflight)
        for target, target_ops in per_target.items():
            cluster.send(self.cid, target, ClientRequest(self.cid, tuple(target_ops)))
        cluster.flush(self.cid)
        cluster.timer(self.cid, self.timeout_ms, self.on_timeout, gid)

    def on_reply(self, reply: ClientReply) -> None:
        gid = self.op_group.get(reply.op_id)
        group = self.groups.get(gid)
        if group is None or reply.op_id not in group.pending:
            return
        group.pending.discard(reply.op_id)
        if reply.ok:
            self.completed[reply.op_id] = self.cluster.now
        else:
            self.failed.add(reply.op_id)
        if not group.pending:
            del self.groups[gid]
            self.pump()

    def on_timeout(self, gid) -> None:
        group = self.groups.get(gid)
        if group is None:
            return
        resend: dict = {}
        for op_id in sorted(group.pending):
            group.tries[op_id] += 1
            if group.tries[op_id] > self.max_retries:
                group.pending.discard(op_id)
                self.failed.add(op_id)
                self.cluster.audit("client_gave_up", op_id)
                continue
            old = group.targets[op_id]
            if len(self.targets) > 1:
                self.suspected.add(old)
            live = self._live_targets()
            target = live[self.rr % len(live)]
            self.rr += 1
            group.targets[op_id] = target
            resend.setdefault(target, []).append(group.ops[op_id])
        for target, ops in resend.items():
            self.cluster.send(self.cid, target, ClientRequest(self.cid, tuple(ops)))
        self.cluster.flush(self.cid)
        if group.pending:
            self.cluster.timer(self.cid, self.timeout_ms, self.on_timeout, gid)
        else:
            del self.groups[gid]
            self.pump()


class ScriptedClient:
    """Sends fixed operations at fixed times; used for hand-built scenarios."""

    def __init__(self, cid: str, cluster: "Cluster", script: list):
        self.cid = cid
        self.cluster = cluster
        self.script = sorted(script, key=lambda s: s[0])  # (time, target, op)
        self.submitted: list = []
        self.completed: dict = {}
        self.failed: set = set()
        self._next = 0

    def start(self, at: float = 0.0) -> None:
        for when, _, _ in self.script:
            self.cluster.sim.schedule(max(at, when), EventKind.CLIENT_ARRIVAL, self)

    def on_arrival(self) -> None:
        when, target, op = self.script[self._next]
        self._next += 1
        op = dataclasses.replace(op, submit_time=self.cluster.now, coordinator=target)
        self.submitted.append(op)
        self.cluster.audit("submit", op.op_id, op.object, op.kind.value, op.submit_time)
        self.cluster.send(self.cid, target, ClientRequest(self.cid, (op,)))
        self.cluster.flush(self.cid)

    def on_reply(self, reply: ClientReply) -> None:
        if reply.ok:
            self.completed.setdefault(reply.op_id, self.cluster.now)
        else:
            self.failed.add(reply.op_id)


class Cluster:
    """Replicas, clients and links wired onto one simulator instance."""

    def __init__(self, n: int, profile: LatencyProfile, protocol: str, om: ObjectManager, seed,
                 batch_size: int = 1, fast_timeout: Optional[float] = None,
                 slow_timeout: Optional[float] = None, slow_retry_limit: int = 3,
                 event_budget: int = 5_000_000, record_trace: bool = True):
        assert protocol in (WOC, CABINET)
        self.sim = Simulator(event_budget)
        self.links = LinkModel(profile)
        self.profile = profile
        self.protocol = protocol
        self.om = om
        self.net_rng = random.Random(f"{seed}:net")
        self.replica_ids = tuple(range(n))
        p99 = self.links.p99_one_way()
        self.fast_timeout = fast_timeout if fast_timeout is not None else 4 * p99
        self.slow_timeout = slow_timeout if slow_timeout is not None else 6 * p99
        self.replicas = {
            r: Replica(r, self, protocol, om.leader, self.fast_timeout, self.slow_timeout,
                       batch_size, slow_retry_limit)
            for r in self.replica_ids
        }
        self.clients: dict = {}
        self.alive_set = set(self.replica_ids)
        self.crashes: list = []
        self.cpu_free = {r: 0.0 for r in self.replica_ids}
        self._link_free: dict = {}
        self._last_arrival: dict = {}
        self._outbox: dict = {}
        self.record_trace = record_trace
        self.audit_log: list = []
        self.send_log: list = []

        h = self.sim.handlers
        h[EventKind.DELIVER] = self._on_deliver
        h[EventKind.PROCESS] = self._on_process
        h[EventKind.CLIENT_ARRIVAL] = lambda client: client.on_arrival()
        h[EventKind.TIMEOUT] = self._on_timeout
        h[EventKind.CRASH] = self._on_crash
        h[EventKind.RECOVER] = self._on_recover

    @property
    def now(self) -> float:
        return self.sim.now

    def alive(self, rid) -> bool:
        return rid in self.alive_set

    def audit(self, *entry) -> None:
        if self.record_trace or entry[0] in ("crash", "recover"):
            self.audit_log.append((self.sim.now,) + entry)

    # clients and faults

    def add_client(self, client: Client, start_at: float = 0.0) -> None:
        self.clients[client.cid] = client
        client.start(start_at)

    def crash(self, rid, at: float) -> None:
        self.sim.schedule(at, EventKind.CRASH, rid)

    def recover(self, rid, at: float) -> None:
        self.sim.schedule(at, EventKind.RECOVER, rid)

    def _on_crash(self, rid) -> None:
        if rid in self.alive_set:
            self.alive_set.discard(rid)
            self.crashes.append((self.now, rid))
            self.audit("crash", rid)

    def _on_recover(self, rid) -> None:
        if rid not in self.alive_set:
            self.alive_set.add(rid)
            self.cpu_free[rid] = self.now
            self.audit("recover", rid)

    # messaging

    def send(self, src, dst, item) -> None:
        if src in self.replicas and src not in self.alive_set:
            return
        self._outbox.setdefault(src, {}).setdefault(dst, []).append(item)

    def flush(self, src) -> None:
        box = self._outbox.pop(src, None)
        if not box:
            return
        now = self.now
        for dst, items in box.items():
            if dst in self.replicas and src in self.replicas:
                link = self.links.replica_link(src, dst)
            else:
                link = self.links.client_link(dst if dst in self.replicas else src)
            size = sum(item_size(i) for i in items)
            key = (src, dst)
            start = max(now, self._link_free.get(key, 0.0))
            done = start + size / link.bandwidth
            self._link_free[key] = done
            arrival = max(done + sample_delay(link, self.net_rng), self._last_arrival.get(key, 0.0))
            self._last_arrival[key] = arrival
            self.sim.schedule(arrival, EventKind.DELIVER, Envelope(src, dst, items))

    def timer(self, owner, delay: float, fn: Callable, *args) -> None:
        self.sim.schedule(self.now + delay, EventKind.TIMEOUT, (owner, fn, args))

    def _on_timeout(self, payload) -> None:
        owner, fn, args = payload
        if owner in self.replicas and owner not in self.alive_set:
            return
        fn(*args)
        self.flush(owner)

    def _on_deliver(self, env: Envelope) -> None:
        dst = env.dst
        if dst in self.clients:
            client = self.clients[dst]
            for item in env.items:
                client.on_reply(item)
            return
        if dst not in self.alive_set:
            return
        cost = self.links.processing_cost(dst, env.items)
        finish = max(self.now, self.cpu_free[dst]) + cost
        self.cpu_free[dst] = finish
        self.sim.schedule(finish, EventKind.PROCESS, env)

    def _on_process(self, env: Envelope) -> None:
        rid = env.dst
        if rid not in self.alive_set:
            return
        replica = self.replicas[rid]
        for item in env.items:
            replica.handle(item)
        replica.after_envelope()
        self.flush(rid)

    def run(self, until: Optional[float] = None) -> list:
        return self.sim.run(until)
