"""
Seeded fixture builders shared by the test modules
"""

import io
import itertools
import json
import random
from datetime import datetime, timezone
from types import MappingProxyType

from cipollino.pathcache import (
    DestinationGraph,
    EdgeProvenance,
    GraphEdge,
    GraphUpdateBundle,
    PathOracle,
    ProvenanceSource,
)
from cipollino.topology import AsTopology, RelationshipKind, parse_ip, parse_prefix
from cipollino.tor_net import ConsensusSnapshot, ExitPolicy, Relay, RelayFlag

VALID_AT = datetime(2024, 1, 1, tzinfo=timezone.utc)
GENERATED_AT = datetime(2023, 12, 31, 12, tzinfo=timezone.utc)
START = VALID_AT.timestamp()

ACCEPT_ALL = [["accept", "*", 1, 65535]]

CLIENT_ASN = 1
ADVERSARY_ASN = 7
GUARD_ASN = 11
SAFE_GUARD_ASN = 12
EXIT_ASN = 21
SAFE_EXIT_ASN = 22
DEST_ASN = 31
OTHER_DEST_ASN = 32

DEST_IP = "31.0.0.10"
OTHER_DEST_IP = "32.0.0.10"


def stream(text):
    """Binary stream over ``text`` as the loaders receive from open(..., 'rb')"""
    return io.BytesIO(text.encode("utf-8"))


def random_topology(rng, n):
    """Relationships over ASes 1..n with an acyclic provider hierarchy plus random peering"""
    topology = AsTopology()
    for asn in range(2, n + 1):
        if rng.random() < 0.2:
            continue
        for provider in rng.sample(range(1, asn), k=min(asn - 1, rng.choice((1, 1, 2)))):
            topology.add_relationship(provider, asn, RelationshipKind.PROVIDER_TO_CUSTOMER)
    for a, b in itertools.combinations(range(1, n + 1), 2):
        if rng.random() < 0.15 and not topology.g.has_edge(a, b):
            topology.add_relationship(a, b, RelationshipKind.PEER_TO_PEER)
    return topology


def mesh_topology(asns, extra=()):
    """Every AS peers with every other; ``extra`` adds (a, b, kind) relationships"""
    topology = AsTopology()
    for a, b in itertools.combinations(sorted(asns), 2):
        topology.add_relationship(a, b, RelationshipKind.PEER_TO_PEER)
    for a, b, kind in extra:
        topology.add_relationship(a, b, kind)
    return topology


def register(topology, asn, prefix):
    topology.add_prefix(parse_prefix(prefix), asn)


def make_relay(fp, address, asn, bandwidth=100, flags=(), family=None, policy=ACCEPT_ALL):
    return Relay(
        fingerprint=fp,
        address=parse_ip(address),
        asn=asn,
        bandwidth=bandwidth,
        flags=frozenset(RelayFlag(f) for f in flags),
        family=family,
        exit_policy=ExitPolicy.parse(policy),
    )


def make_snapshot(relays, valid_at=VALID_AT):
    return ConsensusSnapshot(valid_at, tuple(relays))


def make_bundle(paths=(), generated_at=GENERATED_AT, version="v1"):
    """Measured destination graphs holding every given AS path"""
    edges = {}
    for path in paths:
        dst = path[-1]
        for a, b in zip(path, path[1:]):
            provenance = EdgeProvenance(ProvenanceSource.TRACEROUTE_ATLAS, f"m-{a}-{b}-{dst}")
            edges.setdefault(dst, set()).add(GraphEdge(a, b, provenance))
    graphs = {dst: DestinationGraph(dst, frozenset(e)) for dst, e in sorted(edges.items())}
    return GraphUpdateBundle(generated_at, version, MappingProxyType(graphs))


def bundle_text(paths, generated_at="2023-12-31T12:00:00Z", version="v1"):
    """JSON-lines bundle document with measured edges for each path"""
    lines = [json.dumps({"generated_at": generated_at, "prefix_table_version": version})]
    by_dst = {}
    for path in paths:
        for a, b in zip(path, path[1:]):
            by_dst.setdefault(path[-1], {})[(a, b)] = {"from": a, "to": b, "src": "atlas", "mid": f"m-{a}-{b}-{path[-1]}"}
    for dst, edges in sorted(by_dst.items()):
        lines.append(json.dumps({"dst": dst, "edges": [edges[k] for k in sorted(edges)]}))
    return "\n".join(lines) + "\n"


class AdversaryWorld:
    """Hand-built world where AS 7 watches some paths.

    Client AS 1, guards in AS 11 and AS 12, exits in AS 21 and AS 22,
    destinations in AS 31 and AS 32, all peering with each other. Measured
    paths put AS 7 on client->AS 11 and on AS 21->AS 31, so only circuits
    through AS 11 and AS 21 toward AS 31 are unsafe.
    """

    ases = (CLIENT_ASN, ADVERSARY_ASN, GUARD_ASN, SAFE_GUARD_ASN, EXIT_ASN, SAFE_EXIT_ASN, DEST_ASN, OTHER_DEST_ASN, 41)
    measured = (
        (CLIENT_ASN, ADVERSARY_ASN, GUARD_ASN),
        (EXIT_ASN, ADVERSARY_ASN, DEST_ASN),
    )

    def __init__(self, measured=None, extra=()):
        self.topology = mesh_topology(self.ases, extra)
        for asn in self.ases:
            register(self.topology, asn, f"{asn}.0.0.0/8")
        self.bundle = make_bundle(self.measured if measured is None else measured)
        self.oracle = PathOracle(self.bundle, self.topology)

    def relay(self, fp, asn, host, **kwargs):
        return make_relay(fp, f"{asn}.{host}.0.1", asn, **kwargs)


def web_inputs(sites, endpoints_per_site, dest_prefix_of):
    """Site list and DNS map text; ``dest_prefix_of(i)`` gives site i's first two octets"""
    site_lines = ["site,rank"]
    dns_lines = ["site,ip,port"]
    manifest = 0
    for i in range(sites):
        name = f"site{i}.example"
        site_lines.append(f"{name},{i + 1}")
        for j in range(endpoints_per_site):
            port = 443 if j % 2 == 0 else 80
            dns_lines.append(f"{name},{dest_prefix_of(i)}.{j}.{i % 250 + 1},{port}")
            manifest += 1
    return "\n".join(site_lines) + "\n", "\n".join(dns_lines) + "\n", manifest


class LargeWorld:
    """Many relays and destination ASes, every AS peering with every other.

    Guards sit in ASes 100..109, exits in 110..119, middles in 120..129 and
    destinations in 200..249, so every (guard, exit) pair is safe.
    """

    def __init__(self, seed=7, relays=200, destinations=50):
        rng = random.Random(seed)
        self.dest_asns = list(range(200, 200 + destinations))
        relay_asns = list(range(100, 130))
        self.topology = mesh_topology([CLIENT_ASN] + relay_asns + self.dest_asns)
        register(self.topology, CLIENT_ASN, "1.0.0.0/16")
        for asn in self.dest_asns:
            register(self.topology, asn, f"{asn}.0.0.0/16")
        built = []
        for i in range(relays):
            role = i % 3
            asn = 100 + role * 10 + (i // 3) % 10
            address = f"{10 + i // 250}.{i % 250}.0.1"
            register(self.topology, asn, f"{10 + i // 250}.{i % 250}.0.0/16")
            flags = ("Guard",) if role == 0 else ("Exit",) if role == 1 else ()
            built.append(make_relay(f"R{i:03d}", address, asn, rng.randint(50, 150), flags))
        self.snapshot = make_snapshot(built)
        self.oracle = PathOracle(make_bundle(), self.topology)

    def site_inputs(self, sites=50, endpoints_per_site=4):
        return web_inputs(sites, endpoints_per_site, lambda i: f"{self.dest_asns[i % len(self.dest_asns)]}.0")
