"""Post-run oracles over the commit history, apply logs and audit trail.

Every check is read-only and returns a list of :class:`Violation`; an
empty list means the property held.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Optional

from .protocol import CommitRecord, OpKind, Path
from .weights import WeightVector


@dataclass(frozen=True)
class Violation:
    check: str
    detail: str

    def __str__(self):
        return f"VIOLATION {self.check}: {self.detail}"


@dataclass
class RunTrace:
    """Everything the oracles need from one run."""
    records: list
    logs: dict  # replica -> [(object, op_id, index)]
    submitted: dict  # op_id -> (object, kind, submit time)
    events: list  # audit entries: (time, tag, *fields)
    node_weights: WeightVector
    leader: object
    t: int
    failed: set = field(default_factory=set)

    def crash_schedule(self) -> list:
        return [(e[0], e[1], e[2]) for e in self.events if e[1] in ("crash", "recover")]


def check_quorum_intersection(records: Iterable[CommitRecord]) -> list:
    """Same-object commits on the same path and weight epoch must share a replica."""
    out = []
    groups: dict = defaultdict(dict)
    for rec in records:
        if rec.accumulated_weight < rec.threshold_used:
            out.append(Violation("quorum_intersection",
                                 f"{rec.op_id} weight {rec.accumulated_weight} below {rec.threshold_used}"))
        groups[(rec.object, rec.path, rec.epoch)].setdefault(rec.quorum_members, rec)
    for (obj, path, _), quorums in groups.items():
        for (qa, ra), (qb, rb) in combinations(quorums.items(), 2):
            if not qa & qb:
                out.append(Violation("quorum_intersection",
                                     f"{obj} {path.value}: {ra.op_id} {sorted(qa)} and {rb.op_id} {sorted(qb)} disjoint"))
    return out


def attempt_intervals(records: Iterable[CommitRecord], events: Iterable) -> list:
    """(object, op_id, kind, path, start, end) for every fast and slow attempt.

    Fast attempts end at their commit or fallback; slow attempts run from
    the first slow proposal to the commit, or to the leader giving up.
    An attempt that never ended stays open forever.
    """
    starts: dict = {}
    fallback_at: dict = {}
    failed_at: dict = {}
    meta: dict = {}
    for e in events:
        tag = e[1]
        if tag == "propose":
            _, _, path, op_id, obj, kind = e
            starts.setdefault((op_id, path), e[0])
            meta[op_id] = (obj, kind)
        elif tag == "fallback":
            fallback_at.setdefault(op_id_of(e), e[0])
        elif tag == "failed":
            failed_at[op_id_of(e)] = e[0]
    committed = {r.op_id: r for r in records}
    out = []
    for (op_id, path), start in starts.items():
        obj, kind = meta[op_id]
        rec = committed.get(op_id)
        if path == "fast":
            if op_id in fallback_at:
                end = fallback_at[op_id]
            elif rec is not None and rec.path is Path.FAST:
                end = rec.commit_time
            else:
                end = float("inf")
        elif rec is not None and rec.path is Path.SLOW:
            end = rec.commit_time
        else:
            end = failed_at.get(op_id, float("inf"))
        out.append((obj, op_id, kind, path, start, end))
    return out


def op_id_of(event) -> tuple:
    return event[2]


def check_cross_path_exclusion(records: Iterable[CommitRecord], events: Iterable) -> list:
    """No fast attempt may overlap a slow attempt on a conflicting operation."""
    by_obj: dict = defaultdict(lambda: ([], []))
    for obj, op_id, kind, path, start, end in attempt_intervals(records, events):
        by_obj[obj][0 if path == "fast" else 1].append((start, end, op_id, kind))
    out = []
    for obj, (fast, slow) in by_obj.items():
        if not fast or not slow:
            continue
        slow.sort()
        for fs, fe, fid, fkind in fast:
            for ss, se, sid, skind in slow:
                if ss >= fe:
                    break
                if sid == fid or (fkind == "read" and skind == "read"):
                    continue
                if fs < se:
                    out.append(Violation("cross_path_exclusion",
                                         f"{obj}: fast {fid} [{fs:.4f},{fe:.4f}] overlaps slow {sid} [{ss:.4f},{se:.4f}]"))
    return out


def check_per_object_order(logs: Mapping, records: Optional[Iterable[CommitRecord]] = None) -> list:
    """Replicas agree on each object's order, and that order respects real time.

    A replica that stopped early (crash) may hold a prefix of another
    replica's sequence. With ``records`` the real-time rule is checked too:
    if A committed before B was submitted, A must precede B.
    """
    out = []
    per_obj: dict = defaultdict(dict)
    for rid, log in logs.items():
        seen = set()
        for obj, op_id, _ in log:
            if op_id in seen:
                out.append(Violation("per_object_order", f"replica {rid} applied {op_id} twice"))
            seen.add(op_id)
            per_obj[obj].setdefault(rid, []).append(op_id)
    for obj, seqs in per_obj.items():
        longest = max(seqs.values(), key=len)
        for rid, seq in seqs.items():
            if longest[:len(seq)] != seq:
                at = next(i for i, (a, b) in enumerate(zip(seq, longest)) if a != b)
                out.append(Violation("per_object_order",
                                     f"{obj}: replica {rid} applies {seq[at]} at position {at}, others {longest[at]}"))
    if records is not None:
        by_obj: dict = defaultdict(list)
        for rec in records:
            by_obj[rec.object].append(rec)
        for obj, recs in by_obj.items():
            recs.sort(key=lambda r: r.commit_index)
            # Walk backwards keeping the earliest commit among later-ordered ops.
            earliest = None
            for rec in reversed(recs):
                if earliest is not None and earliest.commit_time < rec.submit_time:
                    out.append(Violation("per_object_order",
                                         f"{obj}: {earliest.op_id} committed at {earliest.commit_time:.4f} before "
                                         f"{rec.op_id} was submitted at {rec.submit_time:.4f} but is ordered after it"))
                if earliest is None or rec.commit_time < earliest.commit_time:
                    earliest = rec
    return out


def surviving_replicas(replicas: Iterable, crash_schedule: Iterable) -> set:
    alive = set(replicas)
    for _, tag, rid in sorted(crash_schedule, key=lambda e: e[0]):
        if tag == "crash":
            alive.discard(rid)
        else:
            alive.add(rid)
    return alive


def quorum_survives(weights: WeightVector, leader, crash_schedule: Iterable) -> bool:
    """Whether the replicas alive after the last fault can still commit."""
    alive = surviving_replicas(weights.rank_to_replica, crash_schedule)
    return leader in alive and weights.weight_sum(alive) >= weights.total / 2


def check_liveness(submitted: Iterable, records: Iterable[CommitRecord], crash_schedule: Iterable,
                   weights: WeightVector, leader, t: int, failed: Iterable = ()) -> list:
    """Exactly-once commits when a quorum survives; explicit failure otherwise."""
    records = list(records)
    out = []
    counts: dict = defaultdict(int)
    for rec in records:
        counts[rec.op_id] += 1
    for op_id, c in counts.items():
        if c > 1:
            out.append(Violation("liveness", f"{op_id} committed {c} times"))
    submitted = list(submitted)
    known = set(submitted)
    for op_id in counts:
        if op_id not in known:
            out.append(Violation("liveness", f"{op_id} committed but never submitted"))
    failed = set(failed)
    if quorum_survives(weights, leader, crash_schedule):
        for op_id in submitted:
            if counts.get(op_id, 0) == 0:
                out.append(Violation("liveness", f"{op_id} never committed although a quorum survived"))
    else:
        for op_id in submitted:
            if counts.get(op_id, 0) == 0 and op_id not in failed:
                out.append(Violation("liveness", f"{op_id} neither committed nor reported failed"))
    return out


def check_fallback_paths(records: Iterable[CommitRecord], events: Iterable) -> list:
    """An op that fell back from the fast path may only commit via the slow path."""
    fell = {op_id_of(e) for e in events if e[1] == "fallback"}
    return [Violation("exactly_once", f"{r.op_id} fell back but committed via fast path")
            for r in records if r.op_id in fell and r.path is Path.FAST]


def check_all(trace: RunTrace) -> dict:
    """Run every oracle; maps check name to its violations."""
    return {
        "quorum_intersection": check_quorum_intersection(trace.records),
        "cross_path_exclusion": check_cross_path_exclusion(trace.records, trace.events),
        "per_object_order": check_per_object_order(trace.logs, trace.records),
        "liveness": check_liveness(trace.submitted, trace.records, trace.crash_schedule(),
                                   trace.node_weights, trace.leader, trace.t, trace.failed)
        + check_fallback_paths(trace.records, trace.events),
    }


# line-delimited trace files


def _jsonable(x):
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (frozenset, set)):
        return sorted(_jsonable(v) for v in x)
    if isinstance(x, (Path, OpKind)):
        return x.value
    return x


def _tup(x):
    return tuple(_tup(v) for v in x) if isinstance(x, list) else x


def record_to_dict(rec: CommitRecord) -> dict:
    return {
        "op_id": list(rec.op_id), "object": rec.object, "path": rec.path.value,
        "quorum": sorted(rec.quorum_members), "weight": rec.accumulated_weight,
        "threshold": rec.threshold_used, "commit_time": rec.commit_time, "index": rec.commit_index,
        "kind": rec.kind.value, "submit_time": rec.submit_time, "epoch": rec.epoch,
    }


def record_from_dict(d: dict) -> CommitRecord:
    return CommitRecord(
        op_id=_tup(d["op_id"]), object=d["object"], path=Path(d["path"]),
        quorum_members=frozenset(d["quorum"]), accumulated_weight=d["weight"],
        threshold_used=d["threshold"], commit_time=d["commit_time"], commit_index=d["index"],
        kind=OpKind(d["kind"]), submit_time=d["submit_time"], epoch=d.get("epoch", 0),
    )


def dump_trace(trace: RunTrace) -> str:
    """Serialize to JSON lines; the output is stable for identical runs."""
    lines = [json.dumps({
        "type": "meta", "t": trace.t, "leader": trace.leader,
        "node_weights": list(trace.node_weights.weights),
        "node_ranks": list(trace.node_weights.rank_to_replica),
        "node_ratio": trace.node_weights.ratio,
    })]
    for e in trace.events:
        if e[1] == "commit":
            continue
        lines.append(json.dumps({"type": "event", "e": _jsonable(list(e))}))
    for rec in trace.records:
        lines.append(json.dumps({"type": "commit", **record_to_dict(rec)}))
    for op_id, (obj, kind, at) in trace.submitted.items():
        lines.append(json.dumps({"type": "submit", "op_id": list(op_id), "object": obj, "kind": kind, "at": at}))
    for rid in sorted(trace.logs):
        for obj, op_id, idx in trace.logs[rid]:
            lines.append(json.dumps({"type": "apply", "replica": rid, "object": obj,
                                     "op_id": list(op_id), "index": idx}))
    for op_id in sorted(trace.failed):
        lines.append(json.dumps({"type": "failed", "op_id": list(op_id)}))
    return "\n".join(lines) + "\n"


def load_trace(lines: Iterable[str]) -> RunTrace:
    meta = None
    records, events, failed = [], [], set()
    submitted: dict = {}
    logs: dict = defaultdict(list)
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            d = json.loads(line)
            kind = d["type"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"trace line {n}: malformed record") from exc
        if kind == "meta":
            meta = d
        elif kind == "event":
            events.append(tuple(_tup(v) for v in d["e"]))
        elif kind == "commit":
            records.append(record_from_dict(d))
        elif kind == "submit":
            submitted[_tup(d["op_id"])] = (d["object"], d["kind"], d["at"])
        elif kind == "apply":
            logs[d["replica"]].append((d["object"], _tup(d["op_id"]), d["index"]))
        elif kind == "failed":
            failed.add(_tup(d["op_id"]))
        else:
            raise ValueError(f"trace line {n}: unknown record type {kind!r}")
    if meta is None:
        raise ValueError("trace has no meta record")
    wv = WeightVector(tuple(meta["node_weights"]), tuple(meta["node_ranks"]), meta["node_ratio"])
    return RunTrace(records, dict(logs), submitted, events, wv, meta["leader"], meta["t"], failed)
