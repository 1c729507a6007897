"""
AS-level topology: relationship graph, prefix table and Gao-Rexford routing
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import heapq
import ipaddress
import logging
from collections import Counter
from types import MappingProxyType
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple, Union

import networkx as nx
import pytricia

from .errors import ArgumentError, ConsistencyError, ParseError, UnknownAsError
from .files import Stream, iter_data_lines

logger = logging.getLogger(__name__)

AsPath = Tuple[int, ...]
Prefix = ipaddress.IPv4Network
IPv4 = ipaddress.IPv4Address

EDGE_REL = "relationship"
MAX_ASN = 2**32 - 1
MAX_ORACLE_PATH_LEN = 10


class Relationship(enum.IntEnum):
    """Relationship of the first AS of an edge toward the second.

    Edges are stored in both directions, so ``P2C`` on (a, b) implies
    ``C2P`` on (b, a).
    """

    C2P = 1
    P2P = 0
    P2C = -1

    def reversed(self) -> Relationship:
        return Relationship(-1 * self.value)


class RelationshipKind(enum.Enum):
    PROVIDER_TO_CUSTOMER = "provider-to-customer"
    PEER_TO_PEER = "peer-to-peer"


class RouteClass(enum.IntEnum):
    """Local preference class of a best route; higher is preferred."""

    PROVIDER = 1
    PEER = 2
    CUSTOMER = 3
    ORIGIN = 4


@dataclasses.dataclass(frozen=True)
class AsRelationship:
    a: int
    b: int
    kind: RelationshipKind

    def __post_init__(self):
        if self.a == self.b:
            raise ArgumentError(f"AS{self.a} cannot have a relationship with itself")


@dataclasses.dataclass(frozen=True)
class Route:
    """Best route of one AS toward a set of origins.

    ``length`` counts ASes on the path including both ends; ``next_hops``
    holds every neighbor whose route ties for best.
    """

    route_class: RouteClass
    length: int
    next_hops: Tuple[int, ...]


RouteTable = Mapping[int, Route]


def as_number(value: Union[int, str]) -> int:
    """Validate and return an AS number"""
    try:
        asn = int(value)
    except (TypeError, ValueError):
        raise ArgumentError(f"Not an AS number: {value!r}") from None
    if not 0 < asn <= MAX_ASN:
        raise ArgumentError(f"AS number out of range: {asn}")
    return asn


def parse_prefix(text: Union[str, Prefix]) -> Prefix:
    """Parse an IPv4 prefix; host bits must be zero"""
    if isinstance(text, ipaddress.IPv4Network):
        return text
    try:
        return ipaddress.IPv4Network(str(text).strip(), strict=True)
    except ValueError as e:
        raise ArgumentError(f"Invalid IPv4 prefix {text!r}: {e}") from None


def parse_ip(text: Union[str, IPv4]) -> IPv4:
    if isinstance(text, ipaddress.IPv4Address):
        return text
    try:
        return ipaddress.IPv4Address(str(text).strip())
    except ValueError as e:
        raise ArgumentError(f"Invalid IPv4 address {text!r}: {e}") from None


class AsTopology:
    """Annotated AS graph plus a longest-prefix-match prefix table.

    Immutable once loaded; route tables are memoized per origin set so the
    instance can be shared between readers.
    """

    def __init__(self):
        self.g = nx.DiGraph()
        self._prefixes = pytricia.PyTricia(32)
        self._origin_prefixes: Dict[int, Set[Prefix]] = {}
        self.stubs: Set[int] = set()
        self._route_table = functools.lru_cache(maxsize=4096)(self._compute_route_table)
        self._memos: Dict[str, Callable] = {}

    # construction

    def add_relationship(self, a: int, b: int, kind: RelationshipKind) -> None:
        """Add both directed edges for a relationship; a is provider for P2C."""
        if a == b:
            raise ArgumentError(f"Self-loop on AS{a}")
        relationship = Relationship.P2C if kind is RelationshipKind.PROVIDER_TO_CUSTOMER else Relationship.P2P
        data = self.g.get_edge_data(a, b, None)
        if data is not None:
            if data[EDGE_REL] != relationship:
                raise ConsistencyError(
                    f"Conflicting relationships for AS{a}-AS{b}: "
                    f"{data[EDGE_REL].name} vs {relationship.name}"
                )
            return
        self.g.add_edge(a, b, **{EDGE_REL: relationship})
        self.g.add_edge(b, a, **{EDGE_REL: relationship.reversed()})

    def add_prefix(self, prefix: Prefix, origin: int) -> None:
        key = str(prefix)
        if self._prefixes.has_key(key):
            existing = self._prefixes[key]
            if existing != origin:
                raise ConsistencyError(f"Prefix {key} registered to AS{existing} and AS{origin}")
            return
        self._prefixes[key] = origin
        self._origin_prefixes.setdefault(origin, set()).add(prefix)

    def add_stub(self, stub: int, provider: int) -> None:
        self.add_relationship(provider, stub, RelationshipKind.PROVIDER_TO_CUSTOMER)
        self.stubs.add(stub)

    # inspection

    def __contains__(self, asn: object) -> bool:
        return asn in self.g

    @property
    def ases(self) -> List[int]:
        return sorted(self.g.nodes)

    @property
    def relationships(self) -> Set[AsRelationship]:
        rels = set()
        for a, b, rel in self.g.edges.data(EDGE_REL):
            if rel == Relationship.P2C:
                rels.add(AsRelationship(a, b, RelationshipKind.PROVIDER_TO_CUSTOMER))
            elif rel == Relationship.P2P and a < b:
                rels.add(AsRelationship(a, b, RelationshipKind.PEER_TO_PEER))
        return rels

    @property
    def prefix_table(self) -> Dict[Prefix, int]:
        return {parse_prefix(key): self._prefixes[key] for key in self._prefixes.keys()}

    @property
    def unattached_origins(self) -> Set[int]:
        """Origins of the prefix table that have no place in the graph"""
        return {asn for asn in self._origin_prefixes if asn not in self.g}

    def require(self, asn: int) -> None:
        if asn not in self.g:
            raise UnknownAsError(asn)

    def relationship(self, a: int, b: int) -> Relationship:
        return self.g[a][b][EDGE_REL]

    def _neighbors(self, asn: int, relationship: Relationship) -> List[int]:
        if asn not in self.g:
            return []
        return sorted(n for n, rel in self.g[asn].items() if rel[EDGE_REL] == relationship)

    def providers(self, asn: int) -> List[int]:
        return self._neighbors(asn, Relationship.C2P)

    def customers(self, asn: int) -> List[int]:
        return self._neighbors(asn, Relationship.P2C)

    def peers(self, asn: int) -> List[int]:
        return self._neighbors(asn, Relationship.P2P)

    # prefixes

    def ip_to_asn(self, ip: Union[str, IPv4]) -> Optional[int]:
        """Origin of the longest matching prefix, or None"""
        return self._prefixes.get(str(parse_ip(ip)))

    def prefix_for(self, ip: Union[str, IPv4]) -> Optional[Prefix]:
        key = self._prefixes.get_key(str(parse_ip(ip)))
        return parse_prefix(key) if key is not None else None

    def origin_of(self, prefix: Prefix) -> Optional[int]:
        key = str(prefix)
        if self._prefixes.has_key(key):
            return self._prefixes[key]
        return None

    def prefixes_of(self, asn: int) -> Set[Prefix]:
        return set(self._origin_prefixes.get(asn, ()))

    def customer_cone(self, asn: int) -> Set[int]:
        """ASes reachable over provider-to-customer edges, asn included"""
        self.require(asn)
        down = nx.subgraph_view(
            self.g, filter_edge=lambda u, v: self.g[u][v][EDGE_REL] == Relationship.P2C
        )
        return nx.descendants(down, asn) | {asn}

    # routing

    def memo(self, name: str, compute: Callable, maxsize: int = 8192) -> Callable:
        """Per-instance memoized ``compute(self, *args)``, built on first use"""
        cached = self._memos.get(name)
        if cached is None:
            cached = functools.lru_cache(maxsize=maxsize)(functools.partial(compute, self))
            self._memos[name] = cached
        return cached

    def route_table(self, origins: Iterable[int]) -> RouteTable:
        """Best routes of every AS toward prefixes announced by ``origins``"""
        key = tuple(sorted(set(origins)))
        if not key:
            raise ArgumentError("At least one origin is required")
        return self._route_table(key)

    def _compute_route_table(self, origins: Tuple[int, ...]) -> RouteTable:
        for origin in origins:
            self.require(origin)
        origin_set = set(origins)
        route_class: Dict[int, RouteClass] = {o: RouteClass.ORIGIN for o in origins}
        length: Dict[int, int] = {o: 1 for o in origins}
        hops: Dict[int, Set[int]] = {o: set() for o in origins}

        # Customer routes climb provider edges one level at a time.
        frontier = sorted(origins)
        while frontier:
            next_frontier = []
            for asn in frontier:
                candidate = length[asn] + 1
                for provider in self.providers(asn):
                    if provider in origin_set:
                        continue
                    if provider not in route_class:
                        route_class[provider] = RouteClass.CUSTOMER
                        length[provider] = candidate
                        hops[provider] = {asn}
                        next_frontier.append(provider)
                    elif route_class[provider] == RouteClass.CUSTOMER and length[provider] == candidate:
                        hops[provider].add(asn)
            frontier = sorted(set(next_frontier))

        # Peer routes: only origin and customer routes cross a peering link.
        exporters = sorted(a for a, c in route_class.items() if c >= RouteClass.CUSTOMER)
        for asn in exporters:
            candidate = length[asn] + 1
            for peer in self.peers(asn):
                current = route_class.get(peer)
                if current is not None and current >= RouteClass.CUSTOMER:
                    continue
                if current is None or candidate < length[peer]:
                    route_class[peer] = RouteClass.PEER
                    length[peer] = candidate
                    hops[peer] = {asn}
                elif candidate == length[peer]:
                    hops[peer].add(asn)

        # Provider routes: every route flows down to customers, shortest first.
        heap = [(length[a], a) for a in route_class]
        heapq.heapify(heap)
        while heap:
            current_len, asn = heapq.heappop(heap)
            if current_len != length[asn]:
                continue
            candidate = current_len + 1
            for customer in self.customers(asn):
                current = route_class.get(customer)
                if current is not None and current >= RouteClass.PEER:
                    continue
                if current is None or candidate < length[customer]:
                    route_class[customer] = RouteClass.PROVIDER
                    length[customer] = candidate
                    hops[customer] = {asn}
                    heapq.heappush(heap, (candidate, customer))
                elif candidate == length[customer]:
                    hops[customer].add(asn)

        table = {
            asn: Route(route_class[asn], length[asn], tuple(sorted(hops[asn])))
            for asn in route_class
        }
        logger.debug("route table toward %s: %d ASes routed", origins, len(table))
        return MappingProxyType(table)

    @staticmethod
    def paths_from(table: RouteTable, src: int) -> Set[AsPath]:
        """Expand the tied next hops of ``src`` into full AS paths"""
        memo: Dict[int, Set[AsPath]] = {}

        def expand(asn: int) -> Set[AsPath]:
            if asn in memo:
                return memo[asn]
            route = table[asn]
            if route.route_class == RouteClass.ORIGIN:
                result = {(asn,)}
            else:
                result = {(asn,) + tail for hop in route.next_hops for tail in expand(hop)}
            memo[asn] = result
            return result

        if src not in table:
            return set()
        return expand(src)

    @staticmethod
    def origins_reached(table: RouteTable) -> Dict[int, FrozenSet[int]]:
        """Map every routed AS to the origins its tied best paths end at"""
        reached: Dict[int, FrozenSet[int]] = {}
        for asn in sorted(table, key=lambda a: (table[a].length, a)):
            route = table[asn]
            if route.route_class == RouteClass.ORIGIN:
                reached[asn] = frozenset({asn})
            else:
                reached[asn] = frozenset().union(*(reached[h] for h in route.next_hops))
        return reached

    def simulate_route(self, src: int, dst: int) -> Set[AsPath]:
        """All tied most-preferred valley-free paths from src to dst"""
        self.require(src)
        self.require(dst)
        if src == dst:
            return {(src,)}
        return self.paths_from(self.route_table((dst,)), src)

    def enumerate_valley_free_paths(self, src: int, dst: int, max_len: int) -> Set[AsPath]:
        """Exhaustive loop-free valley-free paths with at most ``max_len`` ASes"""
        if not 1 <= max_len <= MAX_ORACLE_PATH_LEN:
            raise ArgumentError(f"max_len must be within 1..{MAX_ORACLE_PATH_LEN}, got {max_len}")
        if src not in self.g or dst not in self.g:
            return set()
        found: Set[AsPath] = set()

        def walk(path: List[int], descending: bool) -> None:
            here = path[-1]
            if here == dst:
                found.add(tuple(path))
                return
            if len(path) == max_len:
                return
            for nxt in sorted(self.g[here]):
                if nxt in path:
                    continue
                rel = self.relationship(here, nxt)
                if rel == Relationship.C2P:
                    if descending:
                        continue
                    walk(path + [nxt], False)
                else:
                    if descending and rel == Relationship.P2P:
                        continue
                    walk(path + [nxt], True)

        walk([src], False)
        return found


def load_topology(
    relationships_file: Stream,
    prefix_file: Stream,
    stub_file: Optional[Stream] = None,
) -> AsTopology:
    """Parse CAIDA-style relationships, a prefix table and optional stubs"""
    topology = AsTopology()
    cnt = Counter(lines=0, relationships=0, prefixes=0, stubs=0)

    for number, text in iter_data_lines(relationships_file):
        cnt["lines"] += 1
        fields = text.split("|")
        if len(fields) < 3:
            raise ParseError(f"expected <asn1>|<asn2>|<rel>, got {text!r}", number, "relationships")
        try:
            a, b = as_number(fields[0]), as_number(fields[1])
            rel = int(fields[2])
        except (ArgumentError, ValueError) as e:
            raise ParseError(str(e), number, "relationships") from None
        if rel not in (-1, 0):
            raise ParseError(f"relationship must be -1 or 0, got {rel}", number, "relationships")
        if a == b:
            raise ParseError(f"self-loop on AS{a}", number, "relationships")
        kind = RelationshipKind.PROVIDER_TO_CUSTOMER if rel == -1 else RelationshipKind.PEER_TO_PEER
        topology.add_relationship(a, b, kind)
        cnt["relationships"] += 1

    for number, text in iter_data_lines(prefix_file):
        fields = text.split("|")
        if len(fields) != 2:
            raise ParseError(f"expected <prefix>|<asn>, got {text!r}", number, "prefixes")
        try:
            prefix, origin = parse_prefix(fields[0]), as_number(fields[1])
        except ArgumentError as e:
            raise ParseError(str(e), number, "prefixes") from None
        topology.add_prefix(prefix, origin)
        cnt["prefixes"] += 1

    if stub_file is not None:
        for number, text in iter_data_lines(stub_file):
            fields = text.split("|")
            if len(fields) != 2:
                raise ParseError(f"expected <stub_asn>|<provider_asn>, got {text!r}", number, "stubs")
            try:
                stub, provider = as_number(fields[0]), as_number(fields[1])
            except ArgumentError as e:
                raise ParseError(str(e), number, "stubs") from None
            if stub == provider:
                raise ParseError(f"stub AS{stub} cannot be its own provider", number, "stubs")
            topology.add_stub(stub, provider)
            cnt["stubs"] += 1

    unattached = topology.unattached_origins
    if unattached:
        logger.warning(
            "%d prefix origins are not in the relationship graph and stay unreachable: %s",
            len(unattached),
            sorted(unattached)[:10],
        )
    logger.info(
        "loaded topology: %d ASes, %d relationships, %d prefixes, %d stubs",
        topology.g.number_of_nodes(),
        len(topology.relationships),
        cnt["prefixes"],
        cnt["stubs"],
    )
    return topology


def ip_to_asn(topology: AsTopology, ip: Union[str, IPv4]) -> Optional[int]:
    return topology.ip_to_asn(ip)


def simulate_route(topology: AsTopology, src: int, dst: int) -> Set[AsPath]:
    return topology.simulate_route(src, dst)


def enumerate_valley_free_paths(topology: AsTopology, src: int, dst: int, max_len: int) -> Set[AsPath]:
    return topology.enumerate_valley_free_paths(src, dst, max_len)
