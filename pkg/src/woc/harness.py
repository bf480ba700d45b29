"""Scenario configuration, metrics and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .checker import RunTrace, Violation, check_all
from .node import CABINET, WOC
from .protocol import ObjectClass, ObjectManager, Path
from .simnet import PROFILES, Client, Cluster, LinkModel, Workload, make_profile, pinned_class
from .weights import (WeightDomainError, check_fault_threshold, check_invariants, default_ratio,
                      geometric_weights)

log = logging.getLogger(__name__)

CSV_HEADER = ("protocol", "dimension", "value", "throughput_ops_per_s", "p50_ms", "avg_ms",
              "fast_fraction", "seed")
SWEEP_DIMENSIONS = ("batch", "conflict", "clients", "servers")
STEADY_TRIM = 0.10


class ConfigError(ValueError):
    pass


class ScenarioFailure(RuntimeError):
    """A run finished but at least one checker oracle reported a violation."""

    def __init__(self, result: "ScenarioResult"):
        self.result = result
        lines = [str(v) for vs in result.violations.values() for v in vs]
        super().__init__(f"{len(lines)} violation(s):\n" + "\n".join(lines[:20]))


def sweep_fault_threshold(n: int) -> int:
    """Fault threshold used when a sweep varies the server count."""
    return min((n - 1) // 2, 2)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    protocol: str = WOC
    n_servers: int = 5
    t: Optional[int] = None
    client_count: int = 2
    batch_size: int = 10
    conflict_fraction: Optional[float] = None
    object_mix: tuple = (0.90, 0.05, 0.05)
    payload_bytes: int = 512
    object_ratios: tuple = ()  # ((class name, R), ...); unset classes use the default
    node_ratio: Optional[float] = None
    profile: str = "heterogeneous"
    ops_per_client: int = 2000
    max_inflight: int = 5
    rate: Optional[float] = None  # ops per ms per client; None saturates the in-flight cap
    read_fraction: float = 0.0
    adaptive: bool = False
    crashes: int = 0
    crash_at: float = 5.0
    client_timeout_ms: float = 100.0
    common_pool: int = 32
    hot_pool: int = 4
    client_bandwidth: Optional[float] = None
    event_budget: int = 20_000_000

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.protocol not in (WOC, CABINET):
            raise ConfigError(f"protocol must be {WOC} or {CABINET}, got {self.protocol!r}")
        if self.t is None:
            object.__setattr__(self, "t", sweep_fault_threshold(self.n_servers))
        try:
            check_fault_threshold(self.n_servers, self.t)
        except WeightDomainError as exc:
            raise ConfigError(str(exc)) from None
        if self.conflict_fraction is not None:
            c = self.conflict_fraction
            if not 0.0 <= c <= 1.0:
                raise ConfigError(f"conflict_fraction must be in [0,1], got {c}")
            object.__setattr__(self, "object_mix", (1.0 - c, 0.0, c))
        mix = tuple(float(x) for x in self.object_mix)
        if len(mix) != 3 or any(x < 0 for x in mix) or not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
            raise ConfigError(f"object_mix must be three non-negative fractions summing to 1, got {mix}")
        object.__setattr__(self, "object_mix", mix)
        for name in ("client_count", "batch_size", "ops_per_client", "max_inflight", "payload_bytes",
                     "common_pool", "hot_pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ConfigError("read_fraction must be in [0,1]")
        if not 0 <= self.crashes < self.n_servers:
            raise ConfigError("crashes must leave at least one replica")
        if self.rate is not None and self.rate <= 0:
            raise ConfigError("rate must be positive")
        known = {c.value for c in ObjectClass}
        for name, _ in self.object_ratios:
            if name not in known:
                raise ConfigError(f"unknown object class {name!r}")
        for ratio in self.resolved_ratios().values():
            self._validate_ratio(ratio)
        self._validate_ratio(self.resolved_node_ratio())

    def _validate_ratio(self, ratio: float) -> None:
        try:
            report = check_invariants(geometric_weights(self.n_servers, ratio), self.t)
        except WeightDomainError as exc:
            raise ConfigError(str(exc)) from None
        if not report.ok:
            raise ConfigError(
                f"R={ratio} violates the quorum invariants for n={self.n_servers}, t={self.t} "
                f"(top t+1 sum {report.top_t_plus_1_sum:.4f}, top t sum {report.top_t_sum:.4f}, "
                f"threshold {report.threshold:.4f})")

    def resolved_ratios(self) -> dict:
        ratios = {c: default_ratio(self.n_servers, self.t) for c in ObjectClass}
        for name, r in self.object_ratios:
            ratios[ObjectClass(name)] = float(r)
        return ratios

    def resolved_node_ratio(self) -> float:
        return self.node_ratio if self.node_ratio is not None else default_ratio(self.n_servers, self.t)

    def replace(self, **changes) -> "ScenarioConfig":
        if "n_servers" in changes and "t" not in changes:
            changes["t"] = None
        if "conflict_fraction" not in changes and "object_mix" not in changes:
            changes["object_mix"] = self.object_mix
        return dataclasses.replace(self, **changes)


@dataclass
class MetricsReport:
    protocol: str
    throughput: float
    p50_latency_ms: float
    avg_latency_ms: float
    fast_path_fraction: float
    fast_commit_share: float
    submitted: int
    committed: int
    failed: int
    duration_ms: float
    node_rerank_count: int = 0

    def __post_init__(self):
        assert 0.0 <= self.fast_path_fraction <= 1.0


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    report: MetricsReport
    trace: RunTrace
    violations: dict
    sim_trace: list = field(repr=False, default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    @property
    def records(self) -> list:
        return self.trace.records


def percentile(latencies: Iterable[float], p: float) -> float:
    """Nearest-rank percentile."""
    xs = sorted(latencies)
    if not xs:
        raise ValueError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError(f"percentile rank must be in (0, 100], got {p}")
    return xs[max(1, math.ceil(p / 100 * len(xs))) - 1]


def build_cluster(cfg: ScenarioConfig, record_trace: bool = True) -> Cluster:
    overrides = {}
    if cfg.client_bandwidth is not None:
        overrides["client_bandwidth"] = cfg.client_bandwidth
    profile = make_profile(cfg.profile, cfg.n_servers, **overrides)
    links = LinkModel(profile)
    ratios = cfg.resolved_ratios()
    om = ObjectManager(
        range(cfg.n_servers),
        ratio_for_class=ratios.__getitem__,
        node_ratio=cfg.resolved_node_ratio(),
        prior_latency=links.prior_latency(),
        pinned=pinned_class,
        adaptive=cfg.adaptive,
    )
    cluster = Cluster(cfg.n_servers, profile, cfg.protocol, om, cfg.seed, batch_size=cfg.batch_size,
                      event_budget=cfg.event_budget, record_trace=record_trace)
    workload = Workload(
        mix=cfg.object_mix,
        independent_pool=max(cfg.ops_per_client // 10, 100 * cfg.max_inflight * cfg.batch_size),
        common_pool=cfg.common_pool,
        hot_pool=cfg.hot_pool,
        read_fraction=cfg.read_fraction,
        payload_bytes=cfg.payload_bytes,
    )
    targets = list(cluster.replica_ids) if cfg.protocol == WOC else [om.leader]
    for i in range(cfg.client_count):
        client = Client(f"c{i}", cluster, targets, workload, cfg.ops_per_client,
                        batch_size=cfg.batch_size, max_inflight=cfg.max_inflight, rate=cfg.rate,
                        timeout_ms=cfg.client_timeout_ms, seed=str(cfg.seed))
        cluster.add_client(client)
    for rid in om.node_weights.rank_to_replica[cfg.n_servers - cfg.crashes:]:
        cluster.crash(rid, cfg.crash_at)
    return cluster


def compute_metrics(cfg: ScenarioConfig, cluster: Cluster) -> MetricsReport:
    om = cluster.om
    records = om.records
    submitted = sum(len(c.submitted) for c in cluster.clients.values())
    failed = len(set().union(*(c.failed for c in cluster.clients.values())) - set(om.committed))
    end = max((r.commit_time for r in records), default=0.0)
    lo, hi = STEADY_TRIM * end, (1 - STEADY_TRIM) * end
    steady = [r for r in records if lo <= r.commit_time <= hi]
    window_s = (hi - lo) / 1000.0
    throughput = len(steady) / window_s if window_s > 0 else 0.0
    latencies = [r.commit_time - r.submit_time for r in (steady or records)]
    p50 = percentile(latencies, 50) if latencies else 0.0
    avg = sum(latencies) / len(latencies) if latencies else 0.0
    fast = [r for r in records if r.path is Path.FAST]
    eligible = [r for r in records if om.routed_class.get(r.op_id) is ObjectClass.INDEPENDENT]
    fast_fraction = len(fast) / len(eligible) if eligible else 0.0
    return MetricsReport(
        protocol=cfg.protocol,
        throughput=throughput,
        p50_latency_ms=p50,
        avg_latency_ms=avg,
        fast_path_fraction=fast_fraction,
        fast_commit_share=len(fast) / len(records) if records else 0.0,
        submitted=submitted,
        committed=len(records),
        failed=failed,
        duration_ms=end,
        node_rerank_count=om.node_rerank_count,
    )


def collect_trace(cluster: Cluster, t: int) -> RunTrace:
    om = cluster.om
    submitted = {}
    failed = set()
    for c in cluster.clients.values():
        for op in c.submitted:
            submitted[op.op_id] = (op.object, op.kind.value, op.submit_time)
        failed |= c.failed
    failed = (failed | om.failed) - set(om.committed)
    return RunTrace(
        records=list(om.records),
        logs={rid: list(r.log) for rid, r in cluster.replicas.items()},
        submitted=submitted,
        events=list(cluster.audit_log),
        node_weights=om.node_weights,
        leader=om.leader,
        t=t,
        failed=failed,
    )


def run_scenario(cfg: ScenarioConfig, strict: bool = True) -> ScenarioResult:
    """Simulate to quiescence, compute metrics and run every checker oracle.

    With ``strict`` a violation raises :class:`ScenarioFailure`.
    """
    cluster = build_cluster(cfg)
    sim_trace = cluster.run()
    report = compute_metrics(cfg, cluster)
    trace = collect_trace(cluster, cfg.t)
    violations = check_all(trace)
    result = ScenarioResult(cfg, report, trace, violations, sim_trace)
    if strict and not result.ok:
        raise ScenarioFailure(result)
    return result


# config files


_SCALARS = {
    "seed": int, "protocol": str, "n_servers": int, "t": int, "client_count": int, "batch_size": int,
    "conflict_fraction": float, "payload_bytes": int, "node_ratio": float, "profile": str,
    "ops_per_client": int, "max_inflight": int, "rate": float, "read_fraction": float,
    "crashes": int, "crash_at": float, "client_timeout_ms": float, "common_pool": int, "hot_pool": int,
    "client_bandwidth": float, "event_budget": int,
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def parse_weight_line(line: str) -> tuple:
    """``name, n, t, R`` -> (name, n, t, R)."""
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"weight line needs name, n, t, R: {line!r}")
    try:
        return parts[0], int(parts[1]), int(parts[2]), float(parts[3])
    except ValueError:
        raise ConfigError(f"bad number in weight line {line!r}") from None


def parse_config(text: str) -> ScenarioConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment.

    Lines of the form ``name, n, t, R`` (no ``=``) assign a geometric ratio
    to an object class (``independent``, ``common``, ``hot``) or, with the
    name ``node``, to the slow-path node weights. Their n and t must match
    the scenario.
    """
    values: dict = {}
    weight_lines = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            weight_lines.append((n, parse_weight_line(line)))
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        if key in _SCALARS:
            try:
                values[key] = _SCALARS[key](value)
            except ValueError:
                raise ConfigError(f"line {n}: bad value for {key}: {value!r}") from None
        elif key == "object_mix":
            try:
                values[key] = tuple(float(x) for x in value.split(","))
            except ValueError:
                raise ConfigError(f"line {n}: bad object_mix {value!r}") from None
        elif key == "adaptive":
            values[key] = _parse_bool(value)
        else:
            raise ConfigError(f"line {n}: unknown key {key!r}")
    if "seed" not in values:
        raise ConfigError("seed is mandatory")
    ratios = []
    for n, (name, wn, wt, r) in weight_lines:
        ns, ts = values.get("n_servers", 5), values.get("t", sweep_fault_threshold(values.get("n_servers", 5)))
        if (wn, wt) != (ns, ts):
            raise ConfigError(f"line {n}: weight class {name} is for n={wn}, t={wt}; scenario has n={ns}, t={ts}")
        if name == "node":
            values["node_ratio"] = r
        else:
            ratios.append((name, r))
    if ratios:
        values["object_ratios"] = tuple(ratios)
    return ScenarioConfig(**values)


def format_config(cfg: ScenarioConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "object_ratios" or v is None:
            continue
        if f.name == "object_mix":
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    for name, r in cfg.object_ratios:
        lines.append(f"{name}, {cfg.n_servers}, {cfg.t}, {r}")
    return "\n".join(lines) + "\n"


# sweeps


def sweep_config(base: ScenarioConfig, dimension: str, value) -> ScenarioConfig:
    if dimension == "batch":
        return base.replace(batch_size=int(value))
    if dimension == "conflict":
        return base.replace(conflict_fraction=float(value))
    if dimension == "clients":
        return base.replace(client_count=int(value))
    if dimension == "servers":
        n = int(value)
        if n < 3 or n > 9 or n % 2 == 0:
            raise ConfigError(f"server counts must be odd in 3..9, got {n}")
        return base.replace(n_servers=n, t=sweep_fault_threshold(n), object_ratios=(), node_ratio=None)
    raise ConfigError(f"unknown sweep dimension {dimension!r}; expected one of {SWEEP_DIMENSIONS}")


@dataclass
class SweepRow:
    protocol: str
    dimension: str
    value: str
    report: Optional[MetricsReport]
    seed: int
    error: Optional[str] = None

    def csv_fields(self) -> tuple:
        r = self.report
        if r is None:
            nums = ("nan",) * 4
        else:
            nums = (f"{r.throughput:.3f}", f"{r.p50_latency_ms:.6f}", f"{r.avg_latency_ms:.6f}",
                    f"{r.fast_path_fraction:.6f}")
        return (self.protocol, self.dimension, self.value, *nums, str(self.seed))


def _run_point(args) -> SweepRow:
    cfg, dimension, label = args
    try:
        result = run_scenario(cfg)
        return SweepRow(cfg.protocol, dimension, label, result.report, cfg.seed)
    except (ScenarioFailure, ConfigError) as exc:
        return SweepRow(cfg.protocol, dimension, label, None, cfg.seed, error=str(exc))


def sweep(base: ScenarioConfig, dimension: str, values: Iterable, protocols: Iterable[str] = (WOC, CABINET),
          jobs: int = 1) -> list:
    """One row per (value, protocol). Failing points yield rows with ``error`` set."""
    if dimension not in SWEEP_DIMENSIONS:
        raise ConfigError(f"unknown sweep dimension {dimension!r}; expected one of {SWEEP_DIMENSIONS}")
    points = []
    for value in values:
        label = str(value)
        for proto in protocols:
            try:
                cfg = sweep_config(base.replace(protocol=proto), dimension, value)
            except ConfigError as exc:
                points.append(SweepRow(proto, dimension, label, None, base.seed, error=str(exc)))
                continue
            points.append((cfg, dimension, label))
    todo = [p for p in points if not isinstance(p, SweepRow)]
    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = iter(list(pool.map(_run_point, todo)))
    else:
        done = map(_run_point, todo)
    rows = [p if isinstance(p, SweepRow) else next(done) for p in points]
    for row in rows:
        if row.error:
            log.error("sweep point %s=%s (%s) failed: %s", dimension, row.value, row.protocol, row.error)
    return rows


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()
