"""
Unit tests for the AS topology: loading, prefix lookup and route simulation
"""

import io
import ipaddress
import random

import pytest

from cipollino.errors import ArgumentError, ConsistencyError, ParseError, UnknownAsError
from cipollino.topology import (
    AsTopology,
    RelationshipKind,
    RouteClass,
    enumerate_valley_free_paths,
    ip_to_asn,
    load_topology,
    parse_prefix,
    simulate_route,
)

from tests.fixtures import random_topology, stream
from tests.oracles import converge, longest_prefix_origin, valley_free

P2C = RelationshipKind.PROVIDER_TO_CUSTOMER
P2P = RelationshipKind.PEER_TO_PEER


def build(edges):
    topology = AsTopology()
    for a, b, kind in edges:
        topology.add_relationship(a, b, kind)
    return topology


class TestLoading:
    """Relationship, prefix and stub file parsing"""

    def test_load_relationships_and_prefixes(self):
        """Test a small CAIDA-style file with comments"""
        topology = load_topology(
            stream("# source: test\n1|2|-1\n2|3|0\n\n"),
            stream("10.0.0.0/8|1\n10.1.0.0/16|2\n"),
            stream("4|2\n"),
        )
        assert topology.ases == [1, 2, 3, 4]
        assert topology.customers(1) == [2]
        assert topology.providers(2) == [1]
        assert topology.peers(2) == [3]
        assert topology.customers(2) == [4]
        assert topology.stubs == {4}

    def test_bad_relationship_value(self):
        """Test that an unknown relationship code names its line"""
        with pytest.raises(ParseError) as excinfo:
            load_topology(stream("1|2|-1\n2|3|5\n"), stream(""))
        assert excinfo.value.line_number == 2

    def test_self_loop_rejected(self):
        """Test that an AS cannot be related to itself"""
        with pytest.raises(ParseError):
            load_topology(stream("1|1|0\n"), stream(""))

    def test_short_line_rejected(self):
        with pytest.raises(ParseError):
            load_topology(stream("1|2\n"), stream(""))

    def test_conflicting_relationship(self):
        """Test that the same pair cannot be both peers and provider/customer"""
        with pytest.raises(ConsistencyError):
            load_topology(stream("1|2|-1\n2|1|0\n"), stream(""))

    def test_repeated_relationship_is_ignored(self):
        topology = load_topology(stream("1|2|-1\n1|2|-1\n"), stream(""))
        assert len(topology.relationships) == 1

    def test_conflicting_prefix_origin(self):
        """Test that one prefix cannot have two registered origins"""
        with pytest.raises(ConsistencyError):
            load_topology(stream("1|2|-1\n"), stream("10.0.0.0/8|1\n10.0.0.0/8|2\n"))

    def test_prefix_with_host_bits_rejected(self):
        with pytest.raises(ParseError):
            load_topology(stream("1|2|-1\n"), stream("10.0.0.1/8|1\n"))

    def test_invalid_utf8_names_line(self):
        with pytest.raises(ParseError) as excinfo:
            load_topology(io.BytesIO(b"1|2|-1\n\xff\xfe|3|0\n"), stream(""))
        assert excinfo.value.line_number == 2


class TestPrefixLookup:
    """Longest-prefix match"""

    def setup_method(self):
        self.topology = load_topology(
            stream("1|2|-1\n"),
            stream("10.0.0.0/8|1\n10.1.0.0/16|2\n10.1.2.0/24|1\n"),
        )

    def test_longest_prefix_wins(self):
        """Test the most specific covering prefix decides the origin"""
        assert ip_to_asn(self.topology, "10.1.2.3") == 1
        assert ip_to_asn(self.topology, "10.1.3.3") == 2
        assert ip_to_asn(self.topology, "10.9.9.9") == 1

    def test_no_match_is_none(self):
        assert ip_to_asn(self.topology, "192.0.2.1") is None

    def test_prefix_for_and_origin_of(self):
        prefix = self.topology.prefix_for("10.1.3.3")
        assert prefix == parse_prefix("10.1.0.0/16")
        assert self.topology.origin_of(prefix) == 2
        assert self.topology.origin_of(parse_prefix("10.2.0.0/16")) is None
        assert self.topology.prefixes_of(1) == {parse_prefix("10.0.0.0/8"), parse_prefix("10.1.2.0/24")}

    def test_matches_linear_scan(self):
        """Test random lookups against a linear scan over the table"""
        rng = random.Random(3)
        topology = AsTopology()
        for _ in range(60):
            length = rng.randint(8, 28)
            network = ipaddress.IPv4Network((rng.getrandbits(32), length), strict=False)
            if topology.origin_of(network) is None:
                topology.add_prefix(network, rng.randint(1, 20))
        table = topology.prefix_table
        for _ in range(500):
            ip = ipaddress.IPv4Address(rng.getrandbits(32))
            assert topology.ip_to_asn(ip) == longest_prefix_origin(table, ip)
        for prefix in list(table)[:30]:
            ip = prefix.network_address
            assert topology.ip_to_asn(ip) == longest_prefix_origin(table, ip)


class TestRouting:
    """Gao-Rexford route simulation"""

    def test_customer_route_beats_shorter_provider_route(self):
        """Test that class wins over length"""
        topology = build([(1, 2, P2C), (2, 3, P2C), (3, 4, P2C), (5, 1, P2C), (5, 4, P2C)])
        assert simulate_route(topology, 1, 4) == {(1, 2, 3, 4)}

    def test_peer_route_beats_provider_route(self):
        topology = build([(1, 2, P2P), (2, 3, P2C), (9, 1, P2C), (9, 3, P2C)])
        assert simulate_route(topology, 1, 3) == {(1, 2, 3)}

    def test_ties_are_kept(self):
        """Test that equally preferred paths are all returned"""
        topology = build([(1, 2, P2C), (1, 3, P2C), (2, 4, P2C), (3, 4, P2C)])
        assert simulate_route(topology, 1, 4) == {(1, 2, 4), (1, 3, 4)}

    def test_peer_routes_are_not_exported_to_peers(self):
        topology = build([(1, 2, P2P), (2, 3, P2P)])
        assert simulate_route(topology, 1, 3) == set()

    def test_route_to_self(self):
        topology = build([(1, 2, P2C)])
        assert simulate_route(topology, 2, 2) == {(2,)}

    def test_unknown_as(self):
        topology = build([(1, 2, P2C)])
        with pytest.raises(UnknownAsError):
            simulate_route(topology, 1, 99)

    def test_route_table_needs_origins(self):
        with pytest.raises(ArgumentError):
            build([(1, 2, P2C)]).route_table([])

    def test_route_table_classes(self):
        topology = build([(1, 2, P2C), (2, 3, P2P), (3, 4, P2C)])
        table = topology.route_table([2])
        assert table[2].route_class is RouteClass.ORIGIN
        assert table[1].route_class is RouteClass.CUSTOMER
        assert table[3].route_class is RouteClass.PEER
        assert table[4].route_class is RouteClass.PROVIDER
        assert table[4].length == 3

    def test_customer_cone(self):
        topology = build([(1, 2, P2C), (2, 3, P2C), (1, 4, P2P), (4, 5, P2C)])
        assert topology.customer_cone(1) == {1, 2, 3}
        assert topology.customer_cone(3) == {3}


class TestValleyFreeOracle:
    """Exhaustive valley-free path enumeration"""

    def test_max_len_bounds(self):
        topology = build([(1, 2, P2C)])
        with pytest.raises(ArgumentError):
            enumerate_valley_free_paths(topology, 1, 2, 0)
        with pytest.raises(ArgumentError):
            enumerate_valley_free_paths(topology, 1, 2, 11)

    def test_unknown_endpoints_give_no_paths(self):
        topology = build([(1, 2, P2C)])
        assert enumerate_valley_free_paths(topology, 1, 99, 4) == set()

    def test_valley_is_excluded(self):
        """Test that down-then-up paths are not valley-free"""
        topology = build([(1, 2, P2C), (3, 2, P2C)])
        assert enumerate_valley_free_paths(topology, 1, 3, 5) == set()
        assert enumerate_valley_free_paths(topology, 2, 3, 5) == {(2, 3)}

    def test_random_topologies_agree_with_route_replay(self):
        """Test simulated routes against enumeration and a convergence replay"""
        rng = random.Random(2024)
        for _ in range(50):
            topology = random_topology(rng, rng.randint(3, 10))
            n = max(len(topology.ases), 1)
            for dst in topology.ases:
                replay = converge(topology, {dst})
                table = topology.route_table([dst])
                for src in topology.ases:
                    if src == dst:
                        continue
                    routes = simulate_route(topology, src, dst)
                    assert routes <= enumerate_valley_free_paths(topology, src, dst, min(n, 10))
                    assert all(valley_free(topology, path) for path in routes)
                    expected = replay.get(src)
                    if expected is None:
                        assert routes == set()
                        assert src not in table
                    else:
                        assert table[src].route_class == expected[0]
                        assert routes == expected[1]
