"""
Relay network model: consensus ingestion, relay constraints, weighted
selection and the vanilla client's circuit construction
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
import itertools
import json
import logging
import random
from datetime import datetime
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    MutableSequence,
    Optional,
    Sequence,
    Tuple,
)

from .errors import (
    ArgumentError,
    CircuitStateError,
    IntegrityError,
    NoExitError,
    ParseError,
    SelectionError,
)
from .files import Stream, iter_text_lines, parse_timestamp
from .topology import IPv4, AsTopology, Prefix, parse_ip, parse_prefix

logger = logging.getLogger(__name__)

MIN_PORT = 1
MAX_PORT = 65535
SUBNET_BITS = 16


class RelayFlag(enum.Enum):
    GUARD = "Guard"
    EXIT = "Exit"
    STABLE = "Stable"
    FAST = "Fast"


class PolicyAction(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclasses.dataclass(frozen=True)
class ExitRule:
    action: PolicyAction
    network: Optional[Prefix]
    lo: int
    hi: int

    def __post_init__(self):
        if not MIN_PORT <= self.lo <= self.hi <= MAX_PORT:
            raise ArgumentError(f"Invalid port range {self.lo}-{self.hi}")

    def matches(self, ip: IPv4, port: int) -> bool:
        if not self.lo <= port <= self.hi:
            return False
        return self.network is None or ip in self.network


@dataclasses.dataclass(frozen=True)
class ExitPolicy:
    """First-match accept/reject rules; no match means reject"""

    rules: Tuple[ExitRule, ...] = ()

    @classmethod
    def parse(cls, raw: Sequence[Sequence]) -> ExitPolicy:
        rules = []
        for entry in raw:
            if len(entry) != 4:
                raise ArgumentError(f"Policy rule must be [action, address, lo, hi], got {entry!r}")
            action, address, lo, hi = entry
            try:
                action = PolicyAction(str(action).lower())
            except ValueError:
                raise ArgumentError(f"Unknown policy action {action!r}") from None
            network = None
            if str(address) != "*":
                text = str(address)
                network = parse_prefix(text if "/" in text else f"{text}/32")
            rules.append(ExitRule(action, network, int(lo), int(hi)))
        return cls(tuple(rules))

    def allows(self, ip: IPv4, port: int) -> bool:
        for rule in self.rules:
            if rule.matches(ip, port):
                return rule.action is PolicyAction.ACCEPT
        return False

    def allows_port(self, port: int) -> bool:
        """Whether some address is likely accepted on ``port``"""
        for rule in self.rules:
            if not rule.lo <= port <= rule.hi:
                continue
            if rule.network is None:
                return rule.action is PolicyAction.ACCEPT
            if rule.action is PolicyAction.ACCEPT:
                return True
        return False


@dataclasses.dataclass(frozen=True)
class Relay:
    fingerprint: str
    address: IPv4
    asn: Optional[int]
    bandwidth: int
    flags: FrozenSet[RelayFlag] = frozenset()
    family: Optional[str] = None
    exit_policy: ExitPolicy = ExitPolicy()

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ArgumentError(f"Relay {self.fingerprint} has negative bandwidth")

    @property
    def resolved(self) -> bool:
        return self.asn is not None

    @property
    def is_guard(self) -> bool:
        return RelayFlag.GUARD in self.flags

    @property
    def is_exit(self) -> bool:
        return RelayFlag.EXIT in self.flags

    @property
    def subnet(self) -> Prefix:
        return ipaddress.IPv4Network(f"{self.address}/{SUBNET_BITS}", strict=False)


@dataclasses.dataclass(frozen=True)
class ConsensusSnapshot:
    valid_at: datetime
    relays: Tuple[Relay, ...]

    def __post_init__(self):
        if not self.relays:
            raise IntegrityError("Consensus snapshot holds no relays")
        by_fp = {}
        for relay in self.relays:
            if relay.fingerprint in by_fp:
                raise IntegrityError(f"Duplicate relay fingerprint {relay.fingerprint}")
            by_fp[relay.fingerprint] = relay
        object.__setattr__(self, "_by_fp", by_fp)

    def get(self, fingerprint: str) -> Optional[Relay]:
        return self._by_fp.get(fingerprint)

    @property
    def guards(self) -> List[Relay]:
        return [r for r in self.relays if r.is_guard]

    @property
    def exits(self) -> List[Relay]:
        return [r for r in self.relays if r.is_exit]

    @property
    def usable(self) -> bool:
        return bool(self.guards) and bool(self.exits)

    def supporting_exits(self, ip: Optional[IPv4], port: int) -> List[Relay]:
        """Exit-flagged relays with bandwidth whose policy supports the destination"""
        if ip is None:
            return [r for r in self.exits if r.bandwidth > 0 and r.exit_policy.allows_port(port)]
        return [r for r in self.exits if r.bandwidth > 0 and exit_supports(r, ip, port)]


class CircuitState(enum.Enum):
    LIVE = "live"
    DIRTY = "dirty"
    CLOSED = "closed"


@dataclasses.dataclass(eq=False)
class Circuit:
    """Entry/middle/exit triple with its lifecycle; crypto is not modeled"""

    id: str
    entry: Relay
    middle: Relay
    exit: Relay
    built_at: float
    state: CircuitState = CircuitState.LIVE
    first_used_at: Optional[float] = None
    unsafe_fallback: bool = False

    @property
    def relays(self) -> Tuple[Relay, Relay, Relay]:
        return (self.entry, self.middle, self.exit)

    @property
    def live(self) -> bool:
        return self.state is CircuitState.LIVE

    def supports(self, ip: IPv4, port: int) -> bool:
        return exit_supports(self.exit, ip, port)

    def mark_used(self, now: float) -> None:
        if not self.live:
            raise CircuitStateError(f"Circuit {self.id} is {self.state.value}")
        if self.first_used_at is None:
            self.first_used_at = now

    def mark_dirty(self) -> None:
        if self.state is not CircuitState.LIVE:
            raise CircuitStateError(f"Circuit {self.id} cannot go dirty from {self.state.value}")
        self.state = CircuitState.DIRTY

    def close(self) -> None:
        if self.state is not CircuitState.DIRTY:
            raise CircuitStateError(f"Circuit {self.id} cannot close from {self.state.value}")
        self.state = CircuitState.CLOSED

    def expire(self, now: float, dirty_timeout: float) -> bool:
        """Go dirty once ``dirty_timeout`` has passed since first use"""
        if self.live and self.first_used_at is not None and now - self.first_used_at >= dirty_timeout:
            self.mark_dirty()
            return True
        return False


class CircuitIds:
    """Deterministic per-client circuit id source"""

    def __init__(self, prefix: str = "c"):
        self.prefix = prefix
        self._counter = itertools.count(1)

    def __call__(self) -> str:
        return f"{self.prefix}{next(self._counter):06d}"


class GuardState:
    """Ordered guard list owned by one client"""

    def __init__(self, size: int = 3):
        if size <= 0:
            raise ArgumentError("guard list size must be positive")
        self.size = size
        self.ordered_guards: List[str] = []

    def usable(self, snapshot: ConsensusSnapshot) -> List[Relay]:
        relays = []
        for fp in self.ordered_guards:
            relay = snapshot.get(fp)
            if relay is not None and relay.is_guard and relay.bandwidth > 0:
                relays.append(relay)
        return relays

    def refresh(self, snapshot: ConsensusSnapshot, rng: random.Random) -> None:
        """Drop guards gone from the snapshot and top the list up by weighted draws"""
        self.ordered_guards = [fp for fp in self.ordered_guards if (r := snapshot.get(fp)) is not None and r.is_guard]
        while len(self.usable(snapshot)) < self.size:
            listed = set(self.ordered_guards)
            candidates = [r for r in snapshot.guards if r.fingerprint not in listed and r.bandwidth > 0]
            if not candidates:
                break
            chosen = weighted_select(candidates, rng)
            self.ordered_guards.append(chosen.fingerprint)
            logger.debug("guard list extended with %s", chosen.fingerprint)

    def first_usable(
        self,
        snapshot: ConsensusSnapshot,
        rng: random.Random,
        compatible_with: Sequence[Relay] = (),
    ) -> Optional[Relay]:
        """First listed guard that can share a circuit with ``compatible_with``"""
        self.refresh(snapshot, rng)
        for guard in self.usable(snapshot):
            if all(relays_compatible(guard, other) for other in compatible_with):
                return guard
        return None


def load_consensus(stream: Stream, topology: AsTopology) -> ConsensusSnapshot:
    """Parse the JSON-lines consensus and resolve relay ASNs"""
    valid_at = None
    relays: List[Relay] = []
    seen = set()
    for number, text in iter_text_lines(stream):
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", number, "consensus") from None
        if not isinstance(record, dict):
            raise ParseError("record must be a JSON object", number, "consensus")
        if valid_at is None:
            try:
                valid_at = parse_timestamp(record["valid_at"])
            except (KeyError, ArgumentError) as e:
                raise ParseError(f"bad header record: {e}", number, "consensus") from None
            continue
        try:
            relay = _parse_relay(record, topology)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad relay record: {e}", number, "consensus") from None
        if relay.fingerprint in seen:
            raise IntegrityError(f"Duplicate relay fingerprint {relay.fingerprint} at line {number}")
        seen.add(relay.fingerprint)
        relays.append(relay)

    if valid_at is None:
        raise ParseError("consensus is empty; header record missing", 1, "consensus")
    snapshot = ConsensusSnapshot(valid_at, tuple(relays))
    unresolved = [r.fingerprint for r in relays if not r.resolved]
    if unresolved:
        logger.warning("%d relays have no resolvable ASN", len(unresolved))
    if not snapshot.usable:
        logger.warning("consensus valid at %s has no guard or no exit relay", valid_at)
    logger.info(
        "loaded consensus: %d relays, %d guards, %d exits",
        len(relays),
        len(snapshot.guards),
        len(snapshot.exits),
    )
    return snapshot


def _parse_relay(record: Mapping, topology: AsTopology) -> Relay:
    address = parse_ip(record["ip"])
    flags = set()
    for name in record.get("flags", []):
        try:
            flags.add(RelayFlag(name))
        except ValueError:
            logger.debug("ignoring unknown relay flag %r", name)
    family = record.get("family")
    return Relay(
        fingerprint=str(record["fp"]),
        address=address,
        asn=topology.ip_to_asn(address),
        bandwidth=int(record["bw"]),
        flags=frozenset(flags),
        family=str(family) if family not in (None, "") else None,
        exit_policy=ExitPolicy.parse(record.get("policy", [])),
    )


def exit_supports(relay: Relay, ip, port: int) -> bool:
    """First-match evaluation of the relay's exit policy"""
    if not MIN_PORT <= port <= MAX_PORT:
        raise ArgumentError(f"Port out of range: {port}")
    return relay.exit_policy.allows(parse_ip(ip), port)


def weighted_select(relays: Sequence[Relay], rng: random.Random) -> Relay:
    """Pick one relay with probability proportional to its bandwidth"""
    weights = [r.bandwidth for r in relays]
    if not relays or sum(weights) <= 0:
        raise SelectionError("No relay with positive bandwidth to select from")
    return rng.choices(relays, weights=weights, k=1)[0]


def relays_compatible(a: Relay, b: Relay) -> bool:
    if a.fingerprint == b.fingerprint:
        return False
    if a.family is not None and a.family == b.family:
        return False
    return a.subnet != b.subnet


def constraints_ok(candidate: Sequence[Relay]) -> bool:
    """Distinct relays, families and /16 subnets across a circuit"""
    if len(candidate) != 3:
        raise ArgumentError(f"A circuit has three relays, got {len(candidate)}")
    return all(relays_compatible(a, b) for a, b in itertools.combinations(candidate, 2))


def select_middle(
    snapshot: ConsensusSnapshot,
    entry: Relay,
    exit_relay: Relay,
    rng: random.Random,
) -> Optional[Relay]:
    """Weighted middle draw among relays compatible with both ends"""
    candidates = [
        r for r in snapshot.relays
        if r.bandwidth > 0 and relays_compatible(r, entry) and relays_compatible(r, exit_relay)
    ]
    if not candidates:
        return None
    return weighted_select(candidates, rng)


def vanilla_build(
    snapshot: ConsensusSnapshot,
    guard_state: GuardState,
    dest_ip,
    dest_port: int,
    rng: random.Random,
    new_id: Callable[[], str],
    now: float = 0.0,
    max_resample: int = 100,
) -> Circuit:
    """Guard-list entry, bandwidth-weighted exit and middle.

    ``dest_ip`` may be None when building for a predicted port only.
    """
    ip = parse_ip(dest_ip) if dest_ip is not None else None
    exits = snapshot.supporting_exits(ip, dest_port)
    if not exits:
        raise NoExitError(f"No exit relay supports {dest_ip or '*'}:{dest_port}", [dest_port])
    for _ in range(max_resample):
        exit_relay = weighted_select(exits, rng)
        entry = guard_state.first_usable(snapshot, rng, compatible_with=[exit_relay])
        if entry is None:
            continue
        middle = select_middle(snapshot, entry, exit_relay, rng)
        if middle is None or not constraints_ok([entry, middle, exit_relay]):
            continue
        return Circuit(new_id(), entry, middle, exit_relay, built_at=now)
    raise SelectionError(f"No valid circuit toward port {dest_port} after {max_resample} attempts")


def vanilla_pool_maintain(
    snapshot: ConsensusSnapshot,
    pool: MutableSequence[Circuit],
    recent_ports: Mapping[int, float],
    now: float,
    rng: random.Random,
    guard_state: GuardState,
    new_id: Callable[[], str],
    port_history: float = 3600,
    circuits_per_port: int = 2,
    max_resample: int = 100,
) -> MutableSequence[Circuit]:
    """Keep ``circuits_per_port`` live circuits for every recently seen port"""
    failed = []
    for port in sorted(recent_ports):
        if now - recent_ports[port] > port_history:
            continue
        covering = sum(1 for c in pool if c.live and c.exit.exit_policy.allows_port(port))
        while covering < circuits_per_port:
            try:
                circuit = vanilla_build(snapshot, guard_state, None, port, rng, new_id, now, max_resample)
            except SelectionError as e:
                logger.warning("pre-building for port %d failed: %s", port, e)
                failed.append(port)
                break
            pool.append(circuit)
            covering += 1
            logger.debug("pre-built %s for port %d", circuit.id, port)
    if failed:
        raise NoExitError(f"Could not pre-build circuits for ports {failed}", failed)
    return pool


def relay_counts(circuits: Iterable[Circuit]) -> Dict[str, int]:
    """How often each relay fingerprint was selected across circuits"""
    counts: Dict[str, int] = {}
    for circuit in circuits:
        for relay in circuit.relays:
            counts[relay.fingerprint] = counts.get(relay.fingerprint, 0) + 1
    return counts
