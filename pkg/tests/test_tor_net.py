"""
Unit tests for the relay network model and the vanilla client's circuit building
"""

import json
import logging
import random
from collections import Counter

import pytest

from cipollino.errors import (
    ArgumentError,
    CircuitStateError,
    IntegrityError,
    NoExitError,
    ParseError,
    SelectionError,
)
from cipollino.topology import AsTopology, RelationshipKind, parse_ip
from cipollino.tor_net import (
    CircuitIds,
    CircuitState,
    ExitPolicy,
    GuardState,
    RelayFlag,
    constraints_ok,
    exit_supports,
    load_consensus,
    relay_counts,
    vanilla_build,
    vanilla_pool_maintain,
    weighted_select,
)

from tests.fixtures import DEST_IP, START, LargeWorld, make_relay, make_snapshot, register, stream
from tests.oracles import policy_allows

NO_SMTP = [["reject", "*", 25, 25], ["accept", "*", 1, 65535]]


def small_network(exit_policy=NO_SMTP):
    guard = make_relay("G", "10.0.0.1", 1, flags=("Guard",))
    middle = make_relay("M", "10.1.0.1", 2)
    exit_relay = make_relay("X", "10.2.0.1", 3, flags=("Exit",), policy=exit_policy)
    return make_snapshot([guard, middle, exit_relay])


class TestExitPolicy:
    """First-match exit policies"""

    def test_first_match_wins(self):
        policy = ExitPolicy.parse(NO_SMTP)
        assert not policy.allows(parse_ip("1.2.3.4"), 25)
        assert policy.allows(parse_ip("1.2.3.4"), 443)

    def test_no_match_rejects(self):
        policy = ExitPolicy.parse([["accept", "*", 80, 80]])
        assert not policy.allows(parse_ip("1.2.3.4"), 81)
        assert not ExitPolicy().allows(parse_ip("1.2.3.4"), 80)

    def test_address_rules(self):
        policy = ExitPolicy.parse([["reject", "10.0.0.0/8", 1, 65535], ["accept", "192.0.2.7", 80, 80]])
        assert not policy.allows(parse_ip("10.9.9.9"), 80)
        assert policy.allows(parse_ip("192.0.2.7"), 80)
        assert not policy.allows(parse_ip("192.0.2.8"), 80)

    def test_matches_slow_walk(self):
        """Test random policies against a rule-by-rule walk"""
        rng = random.Random(5)
        addresses = ["*", "10.0.0.0/8", "10.1.0.0/16", "10.1.2.3", "11.0.0.0/8"]
        for _ in range(200):
            rules = []
            for _ in range(rng.randint(0, 5)):
                lo = rng.randint(1, 100)
                rules.append([rng.choice(["accept", "reject"]), rng.choice(addresses), lo, rng.randint(lo, 100)])
            policy = ExitPolicy.parse(rules)
            for _ in range(20):
                ip = f"{rng.choice([10, 11])}.{rng.choice([0, 1])}.{rng.choice([2, 9])}.{rng.choice([3, 4])}"
                port = rng.randint(1, 100)
                assert policy.allows(parse_ip(ip), port) == policy_allows(rules, ip, port)

    def test_allows_port(self):
        """Test the address-free port check used for predicted ports"""
        assert ExitPolicy.parse([["reject", "10.0.0.0/8", 80, 80], ["accept", "*", 1, 65535]]).allows_port(80)
        assert ExitPolicy.parse([["accept", "10.0.0.0/8", 80, 80]]).allows_port(80)
        assert not ExitPolicy.parse([["accept", "10.0.0.0/8", 80, 80]]).allows_port(81)
        assert not ExitPolicy.parse(NO_SMTP).allows_port(25)

    def test_bad_rules(self):
        with pytest.raises(ArgumentError):
            ExitPolicy.parse([["allow", "*", 1, 2]])
        with pytest.raises(ArgumentError):
            ExitPolicy.parse([["accept", "*", 10, 2]])
        with pytest.raises(ArgumentError):
            ExitPolicy.parse([["accept", "*", 1]])

    def test_exit_supports_port_range(self):
        relay = make_relay("X", "10.2.0.1", 3, flags=("Exit",))
        assert exit_supports(relay, DEST_IP, 443)
        with pytest.raises(ArgumentError):
            exit_supports(relay, DEST_IP, 0)
        with pytest.raises(ArgumentError):
            exit_supports(relay, DEST_IP, 65536)


class TestConsensus:
    """JSON-lines consensus loading"""

    def setup_method(self):
        self.topology = AsTopology()
        self.topology.add_relationship(5, 6, RelationshipKind.PEER_TO_PEER)
        register(self.topology, 5, "10.0.0.0/8")

    def lines(self, *relays):
        return "\n".join([json.dumps({"valid_at": "2024-01-01T00:00:00Z"})] + [json.dumps(r) for r in relays]) + "\n"

    def test_load(self, caplog):
        """Test ASN resolution, flags and the unresolved-relay warning"""
        text = self.lines(
            {"fp": "A", "ip": "10.0.0.1", "bw": 100, "flags": ["Guard", "Stable", "Weird"], "family": "fam",
             "policy": [["accept", "*", 1, 65535]]},
            {"fp": "B", "ip": "192.0.2.1", "bw": 50, "flags": ["Exit"]},
        )
        with caplog.at_level(logging.WARNING):
            snapshot = load_consensus(stream(text), self.topology)
        a, b = snapshot.get("A"), snapshot.get("B")
        assert a.asn == 5
        assert a.flags == {RelayFlag.GUARD, RelayFlag.STABLE}
        assert a.family == "fam"
        assert b.asn is None
        assert not b.resolved
        assert [r.fingerprint for r in snapshot.guards] == ["A"]
        assert [r.fingerprint for r in snapshot.exits] == ["B"]
        assert snapshot.usable
        assert "no resolvable ASN" in caplog.text

    def test_duplicate_fingerprint(self):
        text = self.lines({"fp": "A", "ip": "10.0.0.1", "bw": 1}, {"fp": "A", "ip": "10.0.0.2", "bw": 1})
        with pytest.raises(IntegrityError):
            load_consensus(stream(text), self.topology)

    def test_bad_record(self):
        with pytest.raises(ParseError) as excinfo:
            load_consensus(stream(self.lines({"fp": "A", "ip": "not-an-ip", "bw": 1})), self.topology)
        assert excinfo.value.line_number == 2

    def test_header_only(self):
        with pytest.raises(IntegrityError):
            load_consensus(stream(self.lines()), self.topology)

    def test_snapshot_integrity(self):
        with pytest.raises(IntegrityError):
            make_snapshot([])
        relay = make_relay("A", "10.0.0.1", 1)
        with pytest.raises(IntegrityError):
            make_snapshot([relay, relay])

    def test_supporting_exits(self):
        snapshot = small_network()
        assert [r.fingerprint for r in snapshot.supporting_exits(parse_ip(DEST_IP), 443)] == ["X"]
        assert snapshot.supporting_exits(parse_ip(DEST_IP), 25) == []
        assert snapshot.supporting_exits(None, 25) == []


class TestSelection:
    """Bandwidth-weighted selection and relay constraints"""

    def test_zero_bandwidth(self):
        with pytest.raises(SelectionError):
            weighted_select([make_relay("A", "10.0.0.1", 1, bandwidth=0)], random.Random(1))
        with pytest.raises(SelectionError):
            weighted_select([], random.Random(1))

    def test_frequencies_follow_bandwidth(self):
        """Test 10^5 draws against bandwidth shares with a chi-square check"""
        relays = [make_relay(f"R{i}", f"10.{i}.0.1", 1, bandwidth=bw) for i, bw in enumerate((1, 2, 3))]
        rng = random.Random(11)
        draws = 100000
        counts = Counter(weighted_select(relays, rng).fingerprint for _ in range(draws))
        chi_square = 0.0
        for fp, share in (("R0", 1 / 6), ("R1", 2 / 6), ("R2", 3 / 6)):
            assert abs(counts[fp] / draws - share) <= 0.02
            chi_square += (counts[fp] - draws * share) ** 2 / (draws * share)
        # two degrees of freedom, 0.01 level
        assert chi_square < 9.21

    def test_constraints(self):
        a = make_relay("A", "10.0.0.1", 1)
        b = make_relay("B", "10.1.0.1", 2)
        c = make_relay("C", "10.2.0.1", 3)
        assert constraints_ok([a, b, c])
        assert not constraints_ok([a, a, c])
        assert not constraints_ok([a, b, make_relay("D", "10.0.9.9", 4)])
        assert not constraints_ok([
            make_relay("A", "10.0.0.1", 1, family="f"),
            make_relay("B", "10.1.0.1", 2, family="f"),
            c,
        ])
        with pytest.raises(ArgumentError):
            constraints_ok([a, b])

    def test_guard_state(self):
        """Test that the guard list is kept in order and topped up"""
        guards = [make_relay(f"G{i}", f"10.{i}.0.1", 1, flags=("Guard",)) for i in range(5)]
        state = GuardState(size=3)
        rng = random.Random(3)
        state.refresh(make_snapshot(guards), rng)
        assert len(state.ordered_guards) == 3
        assert len(set(state.ordered_guards)) == 3
        kept = state.ordered_guards[1:]
        remaining = [g for g in guards if g.fingerprint != state.ordered_guards[0]]
        state.refresh(make_snapshot(remaining), rng)
        assert state.ordered_guards[:2] == kept
        assert len(state.ordered_guards) == 3
        with pytest.raises(ArgumentError):
            GuardState(size=0)


class TestCircuitLifecycle:
    def test_transitions(self):
        snapshot = small_network()
        circuit = vanilla_build(snapshot, GuardState(), DEST_IP, 80, random.Random(1), CircuitIds(), START)
        circuit.mark_used(START + 5)
        circuit.mark_used(START + 6)
        assert circuit.first_used_at == START + 5
        assert not circuit.expire(START + 604, 600)
        assert circuit.expire(START + 605, 600)
        assert circuit.state is CircuitState.DIRTY
        with pytest.raises(CircuitStateError):
            circuit.mark_used(START + 606)
        with pytest.raises(CircuitStateError):
            circuit.mark_dirty()
        circuit.close()
        assert circuit.state is CircuitState.CLOSED
        with pytest.raises(CircuitStateError):
            circuit.close()

    def test_close_needs_dirty(self):
        circuit = vanilla_build(small_network(), GuardState(), DEST_IP, 80, random.Random(1), CircuitIds(), START)
        with pytest.raises(CircuitStateError):
            circuit.close()

    def test_unused_circuit_never_expires(self):
        circuit = vanilla_build(small_network(), GuardState(), DEST_IP, 80, random.Random(1), CircuitIds(), START)
        assert not circuit.expire(START + 10 ** 6, 600)

    def test_ids(self):
        new_id = CircuitIds()
        assert [new_id(), new_id()] == ["c000001", "c000002"]


class TestVanillaBuild:
    """Vanilla circuit construction and pre-building"""

    def test_build(self):
        circuit = vanilla_build(small_network(), GuardState(), DEST_IP, 443, random.Random(1), CircuitIds(), START)
        assert [r.fingerprint for r in circuit.relays] == ["G", "M", "X"]
        assert circuit.id == "c000001"
        assert circuit.built_at == START
        assert circuit.live
        assert constraints_ok(circuit.relays)
        assert relay_counts([circuit]) == {"G": 1, "M": 1, "X": 1}

    def test_no_exit(self):
        with pytest.raises(NoExitError) as excinfo:
            vanilla_build(small_network(), GuardState(), DEST_IP, 25, random.Random(1), CircuitIds())
        assert excinfo.value.ports == (25,)

    def test_incompatible_relays(self):
        """Test that a guard sharing the exit's /16 never yields a circuit"""
        snapshot = make_snapshot([
            make_relay("G", "10.0.0.1", 1, flags=("Guard",)),
            make_relay("M", "10.1.0.1", 2),
            make_relay("X", "10.0.0.2", 3, flags=("Exit",)),
        ])
        with pytest.raises(SelectionError):
            vanilla_build(snapshot, GuardState(), DEST_IP, 80, random.Random(1), CircuitIds(), max_resample=5)

    def test_pool_maintain(self):
        """Test two circuits per recent port, idempotently"""
        snapshot = small_network()
        pool = []
        guard_state, new_id, rng = GuardState(), CircuitIds(), random.Random(2)
        recent = {80: START, 443: START - 7200}
        vanilla_pool_maintain(snapshot, pool, recent, START + 10, rng, guard_state, new_id)
        assert len(pool) == 2
        vanilla_pool_maintain(snapshot, pool, recent, START + 20, rng, guard_state, new_id)
        assert len(pool) == 2

    def test_pool_maintain_reports_failed_ports(self):
        snapshot = small_network()
        pool = []
        with pytest.raises(NoExitError) as excinfo:
            vanilla_pool_maintain(
                snapshot, pool, {25: START, 80: START}, START, random.Random(2), GuardState(), CircuitIds()
            )
        assert excinfo.value.ports == (25,)
        assert len(pool) == 2

    def test_guard_is_sticky(self):
        """Test that repeated builds keep the head of the guard list"""
        world = LargeWorld()
        guard_state, new_id, rng = GuardState(), CircuitIds(), random.Random(8)
        builds = 3000
        circuits = [
            vanilla_build(world.snapshot, guard_state, "200.0.0.10", 443, rng, new_id, START + i)
            for i in range(builds)
        ]
        head = guard_state.ordered_guards[0]
        assert {c.entry.fingerprint for c in circuits} == {head}
        assert len(guard_state.ordered_guards) == 3

        exits = world.snapshot.supporting_exits(parse_ip("200.0.0.10"), 443)
        total = sum(r.bandwidth for r in exits)
        counts = Counter(c.exit.fingerprint for c in circuits)
        for relay in exits:
            assert abs(counts[relay.fingerprint] / builds - relay.bandwidth / total) <= 0.03

    def test_next_guard_when_head_is_incompatible(self):
        """Test that the second listed guard serves exits sharing the head's /16"""
        guards = [make_relay(f"G{i}", f"10.{i}.0.1", 1, flags=("Guard",)) for i in range(3)]
        guard_state = GuardState()
        guard_state.refresh(make_snapshot(guards), random.Random(1))
        head, second = guard_state.ordered_guards[:2]
        clash = make_relay("X", f"10.{head[1:]}.9.9", 3, flags=("Exit",))
        snapshot = make_snapshot(guards + [clash, make_relay("M", "10.9.0.1", 2)])
        circuit = vanilla_build(snapshot, guard_state, DEST_IP, 443, random.Random(2), CircuitIds(), START)
        assert circuit.entry.fingerprint == second
