"""``woc-lab`` command line."""

from __future__ import annotations

import logging
import sys

import click

from .checker import check_all, dump_trace, load_trace
from .harness import (SWEEP_DIMENSIONS, ConfigError, ScenarioConfig, parse_config, rows_to_csv,
                      run_scenario)
from .harness import sweep as run_sweep
from .node import CABINET, WOC
from .weights import (WeightDomainError, check_fault_threshold, check_invariants, consensus_threshold,
                      feasible_ratio_interval, geometric_weights)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Simulate, sweep and verify the dual-path weighted consensus protocol."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace-out", type=click.Path(dir_okay=False), help="Write the run trace as JSON lines.")
def run(config_path: str, trace_out) -> None:
    """Run one scenario and print its metrics and checker verdict."""
    try:
        with open(config_path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    result = run_scenario(cfg, strict=False)
    r = result.report
    click.echo(f"protocol={r.protocol} n={cfg.n_servers} t={cfg.t} clients={cfg.client_count} "
               f"batch={cfg.batch_size} seed={cfg.seed}")
    click.echo(f"throughput_ops_per_s={r.throughput:.1f} p50_ms={r.p50_latency_ms:.4f} "
               f"avg_ms={r.avg_latency_ms:.4f} fast_fraction={r.fast_path_fraction:.4f}")
    click.echo(f"submitted={r.submitted} committed={r.committed} failed={r.failed} "
               f"sim_ms={r.duration_ms:.2f}")
    if trace_out:
        with open(trace_out, "w", encoding="utf-8") as fh:
            fh.write(dump_trace(result.trace))
    _report(result.violations)


def _report(violations: dict) -> None:
    bad = [v for vs in violations.values() for v in vs]
    for name, vs in violations.items():
        click.echo(f"check {name}: {'pass' if not vs else f'{len(vs)} violation(s)'}")
    for v in bad:
        click.echo(str(v))
    if bad:
        sys.exit(1)


def _values(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


@main.command()
@click.option("--dim", type=click.Choice(SWEEP_DIMENSIONS), required=True)
@click.option("--values", default="", help="Comma-separated sweep points.")
@click.option("--protocol", type=click.Choice([WOC, CABINET, "both"]), default="both")
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path; stdout if omitted.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Base scenario; sweep values override one field.")
@click.option("--ops-per-client", type=int, help="Override the per-client op budget.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel worker processes.")
def sweep(dim, values, protocol, seed, out, config_path, ops_per_client, jobs) -> None:
    """Run a parameter sweep and emit one CSV row per (value, protocol)."""
    try:
        if config_path:
            with open(config_path, encoding="utf-8") as fh:
                base = parse_config(fh.read()).replace(seed=seed)
        else:
            base = ScenarioConfig(seed=seed)
        if ops_per_client:
            base = base.replace(ops_per_client=ops_per_client)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    protocols = (WOC, CABINET) if protocol == "both" else (protocol,)
    rows = run_sweep(base, dim, _values(values), protocols, jobs=jobs)
    text = rows_to_csv(rows)
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)
    failed = [r for r in rows if r.error]
    for r in failed:
        click.echo(f"point {dim}={r.value} ({r.protocol}) failed: {r.error.splitlines()[0]}", err=True)
    if failed:
        sys.exit(1)


@main.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True, dir_okay=False))
def check(trace_path: str) -> None:
    """Re-run every checker oracle over an exported trace."""
    try:
        with open(trace_path, encoding="utf-8") as fh:
            trace = load_trace(fh)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"commits={len(trace.records)} submitted={len(trace.submitted)} replicas={len(trace.logs)}")
    _report(check_all(trace))


@main.command("validate-weights")
@click.option("--n", "n", type=int, required=True)
@click.option("--t", "t", type=int, required=True)
@click.option("--ratio", type=float, required=True)
def validate_weights(n: int, t: int, ratio: float) -> None:
    """Check a geometric weight configuration against both quorum invariants."""
    try:
        check_fault_threshold(n, t)
        wv = geometric_weights(n, ratio)
    except WeightDomainError as exc:
        raise click.ClickException(str(exc))
    rep = check_invariants(wv, t)
    click.echo("weights=" + ",".join(f"{w:.4f}" for w in wv.weights))
    click.echo(f"threshold={consensus_threshold(wv).value:.4f}")
    click.echo(f"top_t_plus_1_sum={rep.top_t_plus_1_sum:.4f} exceeds threshold: {rep.i1_holds}")
    click.echo(f"top_t_sum={rep.top_t_sum:.4f} below threshold: {rep.i2_holds}")
    interval = feasible_ratio_interval(n, t)
    if interval is not None:
        click.echo(f"feasible_ratio_interval=[{interval[0]:.2f}, {interval[1]:.2f}]")
    click.echo("valid" if rep.ok else "invalid")
    if not rep.ok:
        sys.exit(1)
