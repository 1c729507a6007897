"""
Local replica of destination-based routing graphs: stitching, prediction, coverage
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import io
import json
import logging
import random
import re
import threading
from datetime import datetime
from types import MappingProxyType
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import networkx as nx
import numpy as np

from .errors import ArgumentError, IntegrityError, ParseError, UnknownAsError
from .fetch import FetchHook, Location, default_fetcher
from .files import Stream, format_timestamp, iter_data_lines, iter_text_lines, parse_timestamp
from .topology import AsPath, AsTopology, as_number

logger = logging.getLogger(__name__)

MEASUREMENT_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._:/-]*$")


class ProvenanceSource(enum.Enum):
    TRACEROUTE_ATLAS = "atlas"
    TRACEROUTE_ARK = "ark"
    TRACEROUTE_IPLANE = "iplane"
    CONTROL_PLANE_BGP = "bgp"
    SIMULATED = "simulated"

    @classmethod
    def parse(cls, text: str) -> ProvenanceSource:
        if not isinstance(text, str):
            raise ArgumentError(f"Edge provenance must be a string, got {text!r}")
        lowered = text.strip().lower()
        for member in cls:
            if lowered in (member.value, member.name.lower()):
                return member
        raise ArgumentError(f"Unknown edge provenance {text!r}")


class PredictionBasis(enum.Enum):
    MEASURED = "measured"
    SIMULATED_FALLBACK = "simulated"
    MIXED_AUGMENTED = "mixed"


@dataclasses.dataclass(frozen=True)
class EdgeProvenance:
    source: ProvenanceSource
    measurement_id: str = ""

    def __post_init__(self):
        if self.source is ProvenanceSource.SIMULATED and self.measurement_id:
            raise IntegrityError("Simulated edges must not carry a measurement id")
        if self.source is not ProvenanceSource.SIMULATED and not self.measurement_id:
            raise IntegrityError(f"{self.source.value} edge is missing its measurement id")

    @property
    def measured(self) -> bool:
        return self.source is not ProvenanceSource.SIMULATED


@dataclasses.dataclass(frozen=True)
class GraphEdge:
    src: int
    dst: int
    provenance: EdgeProvenance


@dataclasses.dataclass(frozen=True)
class DestinationGraph:
    """Routing DAG whose every edge lies on a path ending at ``dst``"""

    dst: int
    edges: FrozenSet[GraphEdge]

    def __post_init__(self):
        object.__setattr__(self, "_dag", self._build())

    def _build(self) -> nx.DiGraph:
        dag = nx.DiGraph()
        dag.add_node(self.dst)
        for edge in self.edges:
            if edge.src == edge.dst:
                raise IntegrityError(f"Graph for AS{self.dst} has a self-loop on AS{edge.src}")
            if edge.src == self.dst:
                raise IntegrityError(
                    f"Graph for AS{self.dst} has an outgoing edge from its destination "
                    f"(AS{edge.src}->AS{edge.dst})"
                )
            dag.add_edge(edge.src, edge.dst)
        if not nx.is_directed_acyclic_graph(dag):
            cycle = nx.find_cycle(dag)
            raise IntegrityError(f"Graph for AS{self.dst} contains a cycle: {cycle}")
        stranded = set(dag.nodes) - nx.ancestors(dag, self.dst) - {self.dst}
        if stranded:
            raise IntegrityError(
                f"Graph for AS{self.dst} has nodes with no path to the destination: {sorted(stranded)}"
            )
        return dag

    @property
    def dag(self) -> nx.DiGraph:
        return self._dag

    def __contains__(self, asn: object) -> bool:
        return asn in self._dag


@dataclasses.dataclass(frozen=True)
class GraphUpdateBundle:
    generated_at: datetime
    prefix_table_version: str
    graphs: Mapping[int, DestinationGraph]

    def age_seconds(self, at: datetime) -> float:
        return (at - self.generated_at).total_seconds()

    @property
    def edge_count(self) -> int:
        return sum(len(g.edges) for g in self.graphs.values())


@dataclasses.dataclass(frozen=True)
class PathPrediction:
    ases: FrozenSet[int]
    basis: PredictionBasis


def load_update(bundle_file: Stream) -> GraphUpdateBundle:
    """Parse a JSON-lines routing-graph bundle and verify every graph"""
    header = None
    graphs: Dict[int, DestinationGraph] = {}
    for number, text in iter_text_lines(bundle_file):
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", number, "bundle") from None
        if not isinstance(record, dict):
            raise ParseError("record must be a JSON object", number, "bundle")
        if header is None:
            try:
                header = (
                    parse_timestamp(record["generated_at"]),
                    str(record["prefix_table_version"]),
                )
            except (KeyError, ArgumentError) as e:
                raise ParseError(f"bad header record: {e}", number, "bundle") from None
            continue
        try:
            dst = as_number(record["dst"])
            edges = frozenset(
                GraphEdge(
                    as_number(e["from"]),
                    as_number(e["to"]),
                    EdgeProvenance(ProvenanceSource.parse(e["src"]), str(e.get("mid") or "")),
                )
                for e in record["edges"]
            )
        except (KeyError, TypeError, ArgumentError) as e:
            raise ParseError(f"bad graph record: {e}", number, "bundle") from None
        if dst in graphs:
            raise IntegrityError(f"Bundle holds two graphs for AS{dst}")
        graphs[dst] = DestinationGraph(dst, edges)

    if header is None:
        raise ParseError("bundle is empty; header record missing", 1, "bundle")
    bundle = GraphUpdateBundle(header[0], header[1], MappingProxyType(dict(sorted(graphs.items()))))
    logger.info(
        "loaded bundle %s: %d graphs, %d edges",
        bundle.prefix_table_version,
        len(bundle.graphs),
        bundle.edge_count,
    )
    return bundle


def fetch_update(location: Location, fetch: FetchHook = default_fetcher) -> GraphUpdateBundle:
    """Load a bundle from a path or URL through the fetch hook"""
    return load_update(io.BytesIO(fetch(location)))


def stitch(bundle: GraphUpdateBundle, src: int, dst: int) -> Optional[Set[AsPath]]:
    """All simple paths from src to dst inside the destination graph, or None"""
    graph = bundle.graphs.get(dst)
    if graph is None or src not in graph:
        return None
    if src == dst:
        return {(dst,)}
    return {tuple(path) for path in nx.all_simple_paths(graph.dag, src, dst)}


def _union(paths: Iterable[AsPath]) -> FrozenSet[int]:
    return frozenset(asn for path in paths for asn in path)


def predict(bundle: GraphUpdateBundle, topology: AsTopology, src: int, dst: int) -> PathPrediction:
    """AS set on the src->dst path, measured data first, simulation second"""
    stitched = stitch(bundle, src, dst)
    if stitched:
        return PathPrediction(_union(stitched), PredictionBasis.MEASURED)
    if src == dst:
        return PathPrediction(frozenset({src}), PredictionBasis.SIMULATED_FALLBACK)
    try:
        simulated = topology.simulate_route(src, dst)
    except UnknownAsError as e:
        logger.debug("no simulated route %s->%s: %s", src, dst, e)
        simulated = set()
    return PathPrediction(_union(simulated), PredictionBasis.SIMULATED_FALLBACK)


def combine_basis(first: PredictionBasis, second: PredictionBasis) -> PredictionBasis:
    if first is second and first is not PredictionBasis.MIXED_AUGMENTED:
        return first
    return PredictionBasis.MIXED_AUGMENTED


def bidirectional_exposure(
    bundle: GraphUpdateBundle, topology: AsTopology, a: int, b: int
) -> PathPrediction:
    """Union of forward and reverse predictions between a and b"""
    if a == b:
        return PathPrediction(frozenset({a}), predict(bundle, topology, a, a).basis)
    forward = predict(bundle, topology, a, b)
    reverse = predict(bundle, topology, b, a)
    return PathPrediction(forward.ases | reverse.ases, combine_basis(forward.basis, reverse.basis))


class PathOracle:
    """Memoized prediction service over a swappable bundle.

    ``swap_bundle`` replaces bundle and caches in one assignment, so readers
    see either the old or the new state.
    """

    def __init__(self, bundle: GraphUpdateBundle, topology: AsTopology):
        self.topology = topology
        self._lock = threading.Lock()
        self._state = self._make_state(bundle)

    def _make_state(self, bundle: GraphUpdateBundle):
        return (
            bundle,
            functools.lru_cache(maxsize=65536)(functools.partial(predict, bundle, self.topology)),
        )

    @property
    def bundle(self) -> GraphUpdateBundle:
        return self._state[0]

    @property
    def version(self) -> str:
        bundle = self.bundle
        return f"{bundle.prefix_table_version}@{format_timestamp(bundle.generated_at)}"

    def swap_bundle(self, bundle: GraphUpdateBundle) -> None:
        state = self._make_state(bundle)
        with self._lock:
            self._state = state
        logger.info("swapped routing-graph bundle to %s", self.version)

    def predict(self, src: int, dst: int) -> PathPrediction:
        return self._state[1](src, dst)

    def bidirectional(self, a: int, b: int) -> PathPrediction:
        _, cached = self._state
        if a == b:
            return PathPrediction(frozenset({a}), cached(a, a).basis)
        forward = cached(a, b)
        reverse = cached(b, a)
        return PathPrediction(forward.ases | reverse.ases, combine_basis(forward.basis, reverse.basis))


@dataclasses.dataclass(frozen=True)
class CoverageRow:
    bucket: str
    queries: int
    measured: int

    @property
    def fraction(self) -> float:
        return self.measured / self.queries if self.queries else 0.0


ALL_BUCKET = "all"


def coverage_stats(
    bundle: GraphUpdateBundle,
    query_pairs: Sequence[Tuple[int, int]],
    bucket_of: Optional[Callable[[Tuple[int, int]], Iterable[str]]] = None,
) -> List[CoverageRow]:
    """Fraction of query pairs answerable from measured data, per bucket"""
    if not query_pairs:
        raise ArgumentError("coverage_stats needs at least one query pair")
    queries: Dict[str, int] = {ALL_BUCKET: 0}
    measured: Dict[str, int] = {ALL_BUCKET: 0}
    for pair in query_pairs:
        buckets = [ALL_BUCKET]
        if bucket_of is not None:
            buckets.extend(b for b in bucket_of(pair) if b != ALL_BUCKET)
        hit = bool(stitch(bundle, pair[0], pair[1]))
        for bucket in buckets:
            queries[bucket] = queries.get(bucket, 0) + 1
            measured[bucket] = measured.get(bucket, 0) + int(hit)
    rows = [CoverageRow(b, queries[b], measured[b]) for b in queries if b != ALL_BUCKET]
    rows.sort(key=lambda r: r.bucket)
    return [CoverageRow(ALL_BUCKET, queries[ALL_BUCKET], measured[ALL_BUCKET])] + rows


def coverage_rows(rows: Iterable[CoverageRow]) -> List[Tuple[str, int, int, float]]:
    """Rows for the ``bucket,queries,measured,fraction`` CSV"""
    return [(r.bucket, r.queries, r.measured, r.fraction) for r in rows]


def relay_bandwidth_buckets(relays: Iterable, percentiles: Sequence[int] = (10, 25, 50, 100)) -> Dict[str, List]:
    """Group relays into cumulative ``topN`` buckets by bandwidth rank"""
    ordered = sorted(relays, key=lambda r: (-r.bandwidth, r.fingerprint))
    if not ordered:
        return {}
    buckets = {}
    for pct in sorted(set(percentiles)):
        if not 0 < pct <= 100:
            raise ArgumentError(f"percentile must be within 1..100, got {pct}")
        threshold = float(np.percentile([r.bandwidth for r in ordered], 100 - pct))
        buckets[f"top{pct}"] = [r for r in ordered if r.bandwidth >= threshold]
    return buckets


@dataclasses.dataclass(frozen=True)
class VerificationResult:
    sampled: int
    offenders: Tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.offenders


def load_archive_ids(archive_file: Stream) -> Set[str]:
    """Measurement ids of a local archive: one id per line"""
    return {text.split()[0] for _, text in iter_data_lines(archive_file)}


def verify_bundle(
    bundle: GraphUpdateBundle,
    archive_ids: Set[str],
    sample: int,
    rng: random.Random,
) -> VerificationResult:
    """Check a random subset of measured edges against a measurement archive"""
    if sample <= 0:
        raise ArgumentError(f"sample must be positive, got {sample}")
    measured = sorted(
        (
            (graph.dst, edge.src, edge.dst, edge.provenance.measurement_id)
            for graph in bundle.graphs.values()
            for edge in graph.edges
            if edge.provenance.measured
        )
    )
    if sample >= len(measured):
        chosen = measured
    else:
        chosen = sorted(rng.sample(measured, sample))
    offenders = []
    for dst, a, b, mid in chosen:
        if not MEASUREMENT_ID_PATTERN.match(mid) or mid not in archive_ids:
            offenders.append(f"AS{dst}:{a}->{b}:{mid}")
    logger.info("verified %d of %d measured edges, %d offenders", len(chosen), len(measured), len(offenders))
    return VerificationResult(len(chosen), tuple(offenders))
