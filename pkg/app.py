#!/usr/bin/env python3
"""
Cipollino command line
Loads topology, consensus, routing-graph bundle and anomaly feed inputs, runs
an analysis and writes its report files
"""

import functools
import logging
import random
from pathlib import Path

import click

from cipollino import __version__
from cipollino.bgp_risk import attack_success_matrix, ingest_moas
from cipollino.config import ClientConfig, load_config, parse_overrides
from cipollino.errors import CipollinoError, ParseError, VerificationError
from cipollino.fetch import default_fetcher
from cipollino.files import ReportWriter, format_timestamp, iter_csv_rows, iter_data_lines, parse_timestamp
from cipollino.pathcache import (
    PathOracle,
    coverage_rows,
    coverage_stats,
    fetch_update,
    load_archive_ids,
    relay_bandwidth_buckets,
    verify_bundle,
)
from cipollino.simulation import (
    ClientKind,
    ClientModel,
    compare_adversary_models,
    path_accuracy_report,
    relay_load_distribution,
    run_history,
    run_simulation,
)
from cipollino.topology import as_number, load_topology
from cipollino.tor_net import load_consensus
from cipollino.workload import (
    WORKLOAD_HEADER,
    WorkloadLabel,
    generate_mixed_workload,
    generate_web_workload,
    read_workload,
    workload_rows,
)

logger = logging.getLogger("cipollino.cli")

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s %(message)s"

existing_file = click.Path(exists=True, dir_okay=False)


def reports_errors(command):
    """Map library errors onto the stable exit codes"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except VerificationError as e:
            click.echo(f"❌ {e}", err=True)
            for offender in e.offenders:
                click.echo(f"   missing: {offender}", err=True)
            raise click.exceptions.Exit(e.exit_code)
        except CipollinoError as e:
            click.echo(f"❌ {e}", err=True)
            raise click.exceptions.Exit(e.exit_code)

    return wrapper


def topology_options(command):
    command = click.option("--stubs", type=existing_file, help="stub|provider lines")(command)
    command = click.option("--prefixes", required=True, type=existing_file, help="prefix|origin lines")(command)
    command = click.option("--topology", required=True, type=existing_file, help="CAIDA as-rel file")(command)
    return command


def seed_option(command):
    return click.option("--seed", required=True, type=int, help="Seed for every random draw")(command)


def _resolve_seed(ctx, param, value):
    if value is not None:
        return value
    config = ctx.find_object(ClientConfig)
    if config is not None and config.rng_seed is not None:
        return config.rng_seed
    raise click.UsageError("--seed is required unless rng_seed is configured", ctx)


def fallback_seed_option(command):
    """--seed for commands that write no report; defaults to the configured rng_seed"""
    return click.option(
        "--seed", type=int, callback=_resolve_seed, help="Seed for every random draw [default: rng_seed]"
    )(command)


def open_topology(topology, prefixes, stubs):
    with open(topology, "rb") as rel, open(prefixes, "rb") as pfx:
        if stubs is None:
            return load_topology(rel, pfx)
        with open(stubs, "rb") as stub:
            return load_topology(rel, pfx, stub)


def open_consensus(path, topology):
    with open(path, "rb") as f:
        return load_consensus(f, topology)


def open_alerts(location, topology):
    if location is None:
        return []
    return ingest_moas(default_fetcher.open(location), topology)


def read_asns(path):
    with open(path, "rb") as f:
        return [as_number(text.split()[0]) for _, text in iter_data_lines(f)]


def read_pairs(path, header):
    pairs = []
    with open(path, "rb") as f:
        for number, fields in iter_csv_rows(f, header):
            if len(fields) != 2:
                raise ParseError(f"expected {','.join(header)}, got {fields}", number, Path(path).name)
            pairs.append((as_number(fields[0]), as_number(fields[1])))
    return pairs


def write_meta(writer, subcommand, inputs, seed, config=None, **extra):
    meta = {
        "subcommand": subcommand,
        "inputs": {name: str(value) for name, value in inputs.items() if value is not None},
        "seed": seed,
        "version": __version__,
    }
    if config is not None:
        meta["config"] = config.as_dict()
    meta.update(extra)
    writer.write_json("meta.json", meta)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=existing_file, help="Client configuration file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a configuration key")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
@reports_errors
def cli(ctx, config_path, overrides, verbose):
    """AS-aware circuit selection analyses"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format=LOG_FORMAT)
    ctx.obj = load_config(config_path, parse_overrides(overrides))


@cli.command()
@topology_options
@click.option("--consensus", required=True, type=existing_file)
@click.option("--bundle", required=True, help="Routing-graph bundle path or URL")
@click.option("--moas", help="MOAS feed path or URL")
@click.option("--workload", required=True, type=existing_file, help="at,dest_ip,dest_port CSV")
@click.option("--model", type=click.Choice([k.value for k in ClientKind]), default=ClientKind.CIPOLLINO.value)
@click.option("--client-asn", required=True, type=int)
@click.option("--client-ip", help="Client address, when known")
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@reports_errors
def simulate(config: ClientConfig, topology, prefixes, stubs, consensus, bundle, moas, workload, model, client_asn, client_ip, seed, out):
    """Replay a workload through one client model"""
    topo = open_topology(topology, prefixes, stubs)
    snapshot = open_consensus(consensus, topo)
    update = fetch_update(bundle)
    alerts = open_alerts(moas, topo)
    with open(workload, "rb") as f:
        stream = read_workload(f, client_asn, client_ip=client_ip)

    click.echo(f"🚀 Simulating {model} over {len(stream)} requests (seed {seed})")
    oracle = PathOracle(update, topo)
    result = run_simulation(ClientModel(ClientKind(model), config), stream, snapshot, oracle, alerts, random.Random(seed))
    comparison = compare_adversary_models(result)

    writer = ReportWriter(out)
    rows = result.report.summary_rows() + [("forward_only_gap", comparison.gap)]
    writer.write_csv("summary.csv", ("metric", "value"), rows)
    writer.write_jsonl("trace.jsonl", (t.as_dict() for t in result.trace))
    writer.write_csv(
        "relay_load.csv",
        ("percentile", "bandwidth"),
        relay_load_distribution(result.report, snapshot),
    )
    write_meta(
        writer,
        "simulate",
        dict(topology=topology, prefixes=prefixes, stubs=stubs, consensus=consensus, bundle=bundle, moas=moas, workload=workload),
        seed,
        config,
        model=model,
        consensus_valid_at=format_timestamp(snapshot.valid_at),
        bundle_version=oracle.version,
        bundle_age_seconds=update.age_seconds(snapshot.valid_at),
    )
    click.echo(f"✅ {result.report.vulnerable_request_fraction:.3f} of requests vulnerable; reports in {writer.out_dir}")


@cli.command("hijack-matrix")
@topology_options
@click.option("--attackers", required=True, type=existing_file, help="One attacker ASN per line")
@click.option("--pairs", required=True, type=existing_file, help="source,victim CSV")
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@reports_errors
def hijack_matrix(topology, prefixes, stubs, attackers, pairs, seed, out):
    """Hijack and interception success per attacker and per victim"""
    topo = open_topology(topology, prefixes, stubs)
    matrix = attack_success_matrix(topo, read_asns(attackers), read_pairs(pairs, ("source", "victim")))
    writer = ReportWriter(out)
    writer.write_csv(
        "attackers.csv",
        ("attacker_asn", "hijack_fraction", "intercept_fraction", "customer_cone"),
        [row + (len(topo.customer_cone(row[0])),) for row in matrix.attacker_rows()],
    )
    writer.write_csv("victims.csv", ("victim_asn", "attempts", "success_fraction"), matrix.victim_rows())
    write_meta(writer, "hijack-matrix", dict(topology=topology, prefixes=prefixes, stubs=stubs, attackers=attackers, pairs=pairs), seed)
    click.echo(f"✅ {len(matrix.attackers)} attackers evaluated; reports in {writer.out_dir}")


@cli.command("path-accuracy")
@topology_options
@click.option("--bundle", required=True, help="Routing-graph bundle path or URL")
@click.option("--truth", required=True, type=existing_file, help="src_asn,dst_asn,path CSV")
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@reports_errors
def path_accuracy(topology, prefixes, stubs, bundle, truth, seed, out):
    """Over/under-estimation of predicted paths against known paths"""
    oracle = PathOracle(fetch_update(bundle), open_topology(topology, prefixes, stubs))
    with open(truth, "rb") as f:
        report = path_accuracy_report(oracle, f)
    writer = ReportWriter(out)
    writer.write_csv("accuracy.csv", ("basis", "direction", "ases", "paths"), report.histogram())
    write_meta(
        writer,
        "path-accuracy",
        dict(topology=topology, prefixes=prefixes, stubs=stubs, bundle=bundle, truth=truth),
        seed,
        bundle_version=oracle.version,
        skipped_rows=report.skipped,
    )
    click.echo(f"✅ {len(report.rows)} paths compared ({report.skipped} skipped)")


@cli.command("verify-bundle")
@click.option("--bundle", required=True, help="Routing-graph bundle path or URL")
@click.option("--archive", required=True, type=existing_file, help="Measurement ids, one per line")
@click.option("--sample", default=100, show_default=True, type=click.IntRange(min=1))
@fallback_seed_option
@reports_errors
def verify_bundle_cmd(bundle, archive, sample, seed):
    """Check a random sample of measured edges against a measurement archive"""
    update = fetch_update(bundle)
    with open(archive, "rb") as f:
        archive_ids = load_archive_ids(f)
    result = verify_bundle(update, archive_ids, sample, random.Random(seed))
    if not result.ok:
        raise VerificationError(
            f"{len(result.offenders)} of {result.sampled} sampled edges have no archived measurement",
            result.offenders,
        )
    click.echo(f"✅ {result.sampled} sampled edges verified (seed {seed})")


@cli.command()
@topology_options
@click.option("--consensus", required=True, type=existing_file)
@click.option("--bundle", required=True, help="Routing-graph bundle path or URL")
@click.option("--destinations", required=True, type=existing_file, help="One destination ASN per line")
@click.option("--client-asn", required=True, type=int)
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@reports_errors
def coverage(topology, prefixes, stubs, consensus, bundle, destinations, client_asn, seed, out):
    """Share of client/relay/destination paths answerable from measured data"""
    topo = open_topology(topology, prefixes, stubs)
    snapshot = open_consensus(consensus, topo)
    update = fetch_update(bundle)

    by_relay = {}
    for bucket, relays in relay_bandwidth_buckets([r for r in snapshot.relays if r.resolved]).items():
        for relay in relays:
            by_relay.setdefault(relay.fingerprint, set()).add(bucket)
    dsts = read_asns(destinations)
    pair_buckets = {}
    for relay in snapshot.relays:
        if not relay.resolved:
            continue
        ends = ([client_asn] if relay.is_guard else []) + (dsts if relay.is_exit else [])
        for other in ends:
            for pair in ((other, relay.asn), (relay.asn, other)):
                pair_buckets.setdefault(pair, set()).update(by_relay.get(relay.fingerprint, ()))

    rows = coverage_stats(update, sorted(pair_buckets), lambda pair: sorted(pair_buckets[pair]))
    writer = ReportWriter(out)
    writer.write_csv("coverage.csv", ("bucket", "queries", "measured", "fraction"), coverage_rows(rows))
    write_meta(
        writer,
        "coverage",
        dict(topology=topology, prefixes=prefixes, stubs=stubs, consensus=consensus, bundle=bundle, destinations=destinations),
        seed,
    )
    click.echo(f"✅ {rows[0].fraction:.3f} of {rows[0].queries} path queries covered by measurements")


@cli.command()
@topology_options
@click.option("--consensus", "consensus_files", required=True, multiple=True, type=existing_file)
@click.option("--bundle", required=True, help="Routing-graph bundle path or URL")
@click.option("--moas", help="MOAS feed path or URL")
@click.option("--workload", required=True, type=existing_file)
@click.option("--model", type=click.Choice([k.value for k in ClientKind]), default=ClientKind.CIPOLLINO.value)
@click.option("--client-asn", required=True, type=int)
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@reports_errors
def history(config: ClientConfig, topology, prefixes, stubs, consensus_files, bundle, moas, workload, model, client_asn, seed, out):
    """One simulation per consensus snapshot"""
    topo = open_topology(topology, prefixes, stubs)
    snapshots = [open_consensus(path, topo) for path in consensus_files]
    oracle = PathOracle(fetch_update(bundle), topo)
    alerts = open_alerts(moas, topo)
    with open(workload, "rb") as f:
        stream = read_workload(f, client_asn)
    reports = run_history(ClientModel(ClientKind(model), config), stream, snapshots, oracle, alerts, seed)
    writer = ReportWriter(out)
    writer.write_csv(
        "history.csv",
        ("valid_at", "vulnerable_request_fraction", "vulnerable_circuit_fraction", "unique_relays"),
        [
            (format_timestamp(at), r.vulnerable_request_fraction, r.vulnerable_circuit_fraction, r.unique_relays)
            for at, r in reports
        ],
    )
    write_meta(
        writer,
        "history",
        dict(topology=topology, prefixes=prefixes, stubs=stubs, bundle=bundle, moas=moas, workload=workload),
        seed,
        config,
        model=model,
        consensus=list(consensus_files),
    )
    click.echo(f"✅ {len(reports)} snapshots simulated")


@cli.group()
def workload():
    """Generate workload CSVs"""


@workload.command("web")
@click.option("--sites", required=True, type=existing_file, help="site,rank CSV")
@click.option("--dns", required=True, type=existing_file, help="site,ip,port CSV")
@click.option("--start", default="2024-01-01T00:00:00Z", show_default=True)
@click.option("--mean-gap", default=10.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--client-asn", required=True, type=int)
@fallback_seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@reports_errors
def workload_web(sites, dns, start, mean_gap, client_asn, seed, out):
    """Web model: one burst of requests per site"""
    with open(sites, "rb") as s, open(dns, "rb") as d:
        stream = generate_web_workload(s, d, parse_timestamp(start), random.Random(seed), client_asn, mean_gap)
    _write_workload(stream, out)


@workload.command("mixed")
@click.option("--profile", required=True, type=existing_file, help="application,ports,rate_per_hour,destinations CSV")
@click.option("--duration", default=3600, show_default=True, type=click.IntRange(min=0))
@click.option("--client-asn", required=True, type=int)
@fallback_seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@reports_errors
def workload_mixed(profile, duration, client_asn, seed, out):
    """Mixed model: Poisson requests per application"""
    with open(profile, "rb") as f:
        stream = generate_mixed_workload(f, duration, random.Random(seed), client_asn)
    _write_workload(stream, out)


def _write_workload(stream, out):
    target = Path(out)
    writer = ReportWriter(target.parent)
    writer.write_csv(target.name, WORKLOAD_HEADER, workload_rows(stream))
    label = "web" if stream.label is WorkloadLabel.WEB else "mixed"
    click.echo(f"✅ {len(stream)} {label} requests written to {writer.path(target.name)}")


if __name__ == "__main__":
    cli()
