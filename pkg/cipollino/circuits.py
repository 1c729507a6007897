"""
The defense: hijack-augmented exposure sets, safety marking, a pre-built
pool of reusable circuits, load-balanced allocation and on-demand building
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import random
from fractions import Fraction
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
)

from .bgp_risk import MoasAlert, source_prefixes, suspect_sets
from .config import ClientConfig
from .errors import (
    ArgumentError,
    CircuitStateError,
    ExposureError,
    NoExitError,
    SelectionError,
)
from .pathcache import PathOracle, PathPrediction, PredictionBasis, combine_basis
from .tor_net import (
    MAX_PORT,
    MIN_PORT,
    Circuit,
    CircuitIds,
    CircuitState,
    ConsensusSnapshot,
    GuardState,
    Relay,
    constraints_ok,
    relays_compatible,
    select_middle,
    weighted_select,
)
from .topology import IPv4, Prefix, as_number, parse_ip

logger = logging.getLogger(__name__)

# AS 0 never originates routes; it stands for an end that could not be resolved.
UNRESOLVED_ASN = 0


@dataclasses.dataclass(frozen=True)
class ConnectionRequest:
    at: float
    dest_ip: IPv4
    dest_port: int
    client_asn: int
    client_ip: Optional[IPv4] = None

    def __post_init__(self):
        if not MIN_PORT <= self.dest_port <= MAX_PORT:
            raise ArgumentError(f"Port out of range: {self.dest_port}")
        object.__setattr__(self, "dest_ip", parse_ip(self.dest_ip))
        object.__setattr__(self, "client_asn", as_number(self.client_asn))
        if self.client_ip is not None:
            object.__setattr__(self, "client_ip", parse_ip(self.client_ip))


class ExposureMode(enum.Enum):
    FORWARD_ONLY = "forward"
    ASYMMETRIC = "asymmetric"


@dataclasses.dataclass(frozen=True)
class ExposureSets:
    src_en: FrozenSet[int]
    ex_dst: FrozenSet[int]
    basis: PredictionBasis


@dataclasses.dataclass(frozen=True)
class SafetyVerdict:
    adversaries: FrozenSet[int] = frozenset()

    @property
    def safe(self) -> bool:
        return not self.adversaries

    @property
    def failed_closed(self) -> bool:
        return UNRESOLVED_ASN in self.adversaries


UNRESOLVED_VERDICT = SafetyVerdict(frozenset({UNRESOLVED_ASN}))


@dataclasses.dataclass
class CircuitPool:
    circuits: List[Circuit] = dataclasses.field(default_factory=list)
    target_size: int = 4

    def __post_init__(self):
        if self.target_size <= 0:
            raise ArgumentError("pool target size must be positive")

    def evict(self) -> List[Circuit]:
        """Drop every circuit that is no longer Live"""
        evicted = [c for c in self.circuits if not c.live]
        for circuit in evicted:
            if circuit.state is CircuitState.DIRTY:
                circuit.close()
        self.circuits = [c for c in self.circuits if c.live]
        return evicted


class _BasisTracker:
    def __init__(self):
        self.basis: Optional[PredictionBasis] = None

    def add(self, basis: PredictionBasis) -> None:
        self.basis = basis if self.basis is None else combine_basis(self.basis, basis)


def _require_path(prediction: PathPrediction, src: int, dst: int) -> PathPrediction:
    if src != dst and not prediction.ases:
        raise ExposureError(f"No path predicted from AS{src} to AS{dst}")
    return prediction


def _bidirectional_side(oracle: PathOracle, a: int, b: int, suspects: Iterable[int], tracker) -> Set[int]:
    ases = {a, b}
    legs = [(a, b)]
    for h in sorted(suspects):
        ases.add(h)
        legs.extend([(h, a), (h, b)])
    for x, y in legs:
        forward = _require_path(oracle.predict(x, y), x, y)
        reverse = _require_path(oracle.predict(y, x), y, x)
        tracker.add(combine_basis(forward.basis, reverse.basis))
        ases |= forward.ases | reverse.ases
    return ases


def _forward_side(oracle: PathOracle, a: int, b: int, suspects: Iterable[int], tracker) -> Set[int]:
    ases = {a, b}
    legs = [(a, b)]
    for h in sorted(suspects):
        ases.add(h)
        legs.extend([(a, h), (h, b)])
    for x, y in legs:
        prediction = _require_path(oracle.predict(x, y), x, y)
        tracker.add(prediction.basis)
        ases |= prediction.ases
    return ases


def pair_exposure(
    entry: Relay,
    exit_relay: Relay,
    request: ConnectionRequest,
    oracle: PathOracle,
    alerts: Sequence[MoasAlert] = (),
    mode: ExposureMode = ExposureMode.ASYMMETRIC,
) -> ExposureSets:
    """Exposure sets of an (entry, exit) pair serving ``request``"""
    topology = oracle.topology
    dst = topology.ip_to_asn(request.dest_ip)
    if dst is None:
        raise ExposureError(f"No prefix covers destination {request.dest_ip}")
    for relay in (entry, exit_relay):
        if relay.asn is None:
            raise ExposureError(f"Relay {relay.fingerprint} at {relay.address} has no AS")
    suspects = suspect_sets(
        alerts,
        topology,
        entry.address,
        exit_relay.address,
        request.dest_ip,
        request.client_asn,
        request.client_ip,
    )
    tracker = _BasisTracker()
    if mode is ExposureMode.ASYMMETRIC:
        src_en = _bidirectional_side(oracle, request.client_asn, entry.asn, suspects.h_en | suspects.h_src, tracker)
        ex_dst = _bidirectional_side(oracle, exit_relay.asn, dst, suspects.h_ex | suspects.h_dst, tracker)
    else:
        # Forward legs only: the client->entry and exit->destination directions.
        src_en = _forward_side(oracle, request.client_asn, entry.asn, suspects.h_en, tracker)
        ex_dst = _forward_side(oracle, exit_relay.asn, dst, suspects.h_dst, tracker)
    return ExposureSets(frozenset(src_en), frozenset(ex_dst), tracker.basis)


def compute_exposure(
    circuit: Circuit,
    request: ConnectionRequest,
    oracle: PathOracle,
    alerts: Sequence[MoasAlert] = (),
    mode: ExposureMode = ExposureMode.ASYMMETRIC,
) -> ExposureSets:
    if not circuit.live:
        raise CircuitStateError(f"Circuit {circuit.id} is {circuit.state.value}")
    return pair_exposure(circuit.entry, circuit.exit, request, oracle, alerts, mode)


def mark_safety(exposure: ExposureSets) -> SafetyVerdict:
    return SafetyVerdict(exposure.src_en & exposure.ex_dst)


def judge_pair(
    entry: Relay,
    exit_relay: Relay,
    request: ConnectionRequest,
    oracle: PathOracle,
    alerts: Sequence[MoasAlert] = (),
    mode: ExposureMode = ExposureMode.ASYMMETRIC,
) -> SafetyVerdict:
    """Verdict for a pair; unresolvable ends fail closed"""
    try:
        return mark_safety(pair_exposure(entry, exit_relay, request, oracle, alerts, mode))
    except ExposureError as e:
        logger.debug("treating %s/%s as unsafe: %s", entry.fingerprint, exit_relay.fingerprint, e)
        return UNRESOLVED_VERDICT


def bandwidth_product(entry: Relay, exit_relay: Relay) -> int:
    return entry.bandwidth * exit_relay.bandwidth


def allocation_probabilities(circuits: Sequence[Circuit]) -> List[Fraction]:
    """Selection probability of each circuit, proportional to BW_en * BW_ex"""
    if not circuits:
        return []
    products = [bandwidth_product(c.entry, c.exit) for c in circuits]
    total = sum(products)
    if total == 0:
        return [Fraction(1, len(circuits))] * len(circuits)
    return [Fraction(p, total) for p in products]


def _weighted_draw(items: Sequence, products: Sequence[int], rng: random.Random):
    if len(items) == 1:
        return items[0]
    if sum(products) == 0:
        return rng.choice(items)
    return rng.choices(items, weights=products, k=1)[0]


def allocate(
    circuits: Iterable[Circuit],
    request: ConnectionRequest,
    verdict_for: Callable[[Circuit], SafetyVerdict],
    rng: random.Random,
) -> Optional[Circuit]:
    """Pick a live, supporting, safe circuit for ``request``; None if there is none"""
    candidates = []
    for circuit in sorted(circuits, key=lambda c: c.id):
        if not circuit.live or not circuit.supports(request.dest_ip, request.dest_port):
            continue
        if verdict_for(circuit).safe:
            candidates.append(circuit)
    if not candidates:
        return None
    products = [bandwidth_product(c.entry, c.exit) for c in candidates]
    return _weighted_draw(candidates, products, rng)


def _least_exposed(items: Sequence, counts: Sequence[int], products: Sequence[int], rng: random.Random):
    fewest = min(counts)
    tied = [i for i, n in enumerate(counts) if n == fewest]
    index = _weighted_draw(tied, [products[i] for i in tied], rng)
    return items[index]


def fallback_select(candidates: Sequence[Tuple[Circuit, SafetyVerdict]], rng: random.Random) -> Circuit:
    """Circuit with the fewest adversaries; ties drawn by bandwidth product"""
    if not candidates:
        raise ArgumentError("fallback_select needs at least one candidate")
    circuits = [c for c, _ in candidates]
    return _least_exposed(
        circuits,
        [len(v.adversaries) for _, v in candidates],
        [bandwidth_product(c.entry, c.exit) for c in circuits],
        rng,
    )


def _sampling_key(rng: random.Random, weight: int) -> float:
    """log(u) / w, the order of u ** (1 / w) without underflow at large weights"""
    u = rng.random()
    return math.log(u) / weight if u > 0.0 else -math.inf


def _ordered_pairs(entries: Sequence[Relay], exits: Sequence[Relay], rng: random.Random) -> List[Tuple[Relay, Relay]]:
    """Weighted sampling without replacement over compatible pairs"""
    pairs = [
        (en, ex)
        for en in sorted(entries, key=lambda r: r.fingerprint)
        for ex in sorted(exits, key=lambda r: r.fingerprint)
        if en.bandwidth > 0 and ex.bandwidth > 0 and relays_compatible(en, ex)
    ]
    keyed = [(_sampling_key(rng, bandwidth_product(en, ex)), i) for i, (en, ex) in enumerate(pairs)]
    keyed.sort(reverse=True)
    return [pairs[i] for _, i in keyed]


def build_on_demand(
    snapshot: ConsensusSnapshot,
    request: ConnectionRequest,
    judge: Callable[[Relay, Relay], SafetyVerdict],
    rng: random.Random,
    new_id: Callable[[], str],
    entries: Sequence[Relay],
    now: float = 0.0,
    budget: int = 64,
) -> Circuit:
    """Search (entry, exit) pairs for a safe circuit, falling back to the least exposed"""
    exits = snapshot.supporting_exits(request.dest_ip, request.dest_port)
    if not exits:
        raise NoExitError(f"No exit relay supports {request.dest_ip}:{request.dest_port}", [request.dest_port])
    if budget <= 0:
        raise ArgumentError("candidate budget must be positive")

    evaluated: List[Tuple[Relay, Relay, SafetyVerdict]] = []
    for entry, exit_relay in _ordered_pairs(entries, exits, rng)[:budget]:
        verdict = judge(entry, exit_relay)
        if verdict.safe:
            middle = select_middle(snapshot, entry, exit_relay, rng)
            if middle is not None:
                return Circuit(new_id(), entry, middle, exit_relay, built_at=now)
        evaluated.append((entry, exit_relay, verdict))

    while evaluated:
        entry, exit_relay, verdict = _least_exposed(
            evaluated,
            [len(v.adversaries) for _, _, v in evaluated],
            [bandwidth_product(en, ex) for en, ex, _ in evaluated],
            rng,
        )
        middle = select_middle(snapshot, entry, exit_relay, rng)
        if middle is not None:
            logger.info(
                "no safe circuit for %s:%d within %d candidates; falling back to %d adversaries",
                request.dest_ip,
                request.dest_port,
                budget,
                len(verdict.adversaries),
            )
            return Circuit(new_id(), entry, middle, exit_relay, built_at=now, unsafe_fallback=True)
        evaluated = [item for item in evaluated if item[:2] != (entry, exit_relay)]
    raise SelectionError(f"No valid circuit for {request.dest_ip}:{request.dest_port}")


def build_pool_circuit(
    snapshot: ConsensusSnapshot,
    entries: Sequence[Relay],
    rng: random.Random,
    new_id: Callable[[], str],
    now: float = 0.0,
    max_resample: int = 100,
) -> Circuit:
    """Destination-agnostic circuit with bandwidth-weighted relays"""
    exits = [r for r in snapshot.exits if r.bandwidth > 0]
    if not exits:
        raise NoExitError("Consensus has no exit relay with bandwidth")
    for _ in range(max_resample):
        entry = weighted_select(entries, rng)
        exit_relay = weighted_select(exits, rng)
        middle = weighted_select(snapshot.relays, rng)
        if constraints_ok([entry, middle, exit_relay]):
            return Circuit(new_id(), entry, middle, exit_relay, built_at=now)
    raise SelectionError(f"No valid pool circuit after {max_resample} attempts")


def replenish(
    pool: CircuitPool,
    snapshot: ConsensusSnapshot,
    entries: Sequence[Relay],
    rng: random.Random,
    new_id: Callable[[], str],
    now: float = 0.0,
    max_resample: int = 100,
) -> List[Circuit]:
    """Evict non-live circuits and build up to the target; returns the new circuits"""
    evicted = pool.evict()
    if evicted:
        logger.debug("evicted %d circuits from the pool", len(evicted))
    built = []
    while len(pool.circuits) < pool.target_size:
        try:
            circuit = build_pool_circuit(snapshot, entries, rng, new_id, now, max_resample)
        except SelectionError as e:
            logger.warning("pool below target (%d/%d): %s", len(pool.circuits), pool.target_size, e)
            break
        pool.circuits.append(circuit)
        built.append(circuit)
    return built


@dataclasses.dataclass(frozen=True)
class _CachedVerdict:
    verdict: SafetyVerdict
    prefixes: FrozenSet[Prefix]


class VerdictCache:
    """Verdicts per (circuit, destination AS, destination prefix) for one bundle version"""

    def __init__(self):
        self.version: Optional[str] = None
        self._entries: Dict[Tuple[str, int, str], _CachedVerdict] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def sync(self, version: str) -> None:
        if version != self.version:
            if self._entries:
                logger.debug("bundle changed to %s; dropping %d cached verdicts", version, len(self._entries))
            self._entries.clear()
            self.version = version

    def get(self, key) -> Optional[SafetyVerdict]:
        cached = self._entries.get(key)
        return cached.verdict if cached is not None else None

    def put(self, key, verdict: SafetyVerdict, prefixes: Iterable[Prefix]) -> None:
        self._entries[key] = _CachedVerdict(verdict, frozenset(prefixes))

    def invalidate_covered(self, alert_prefixes: Iterable[Prefix]) -> int:
        """Drop verdicts that consulted a prefix covered by any of ``alert_prefixes``"""
        alert_prefixes = list(alert_prefixes)
        stale = [
            key
            for key, cached in self._entries.items()
            if any(p.subnet_of(q) for p in cached.prefixes for q in alert_prefixes)
        ]
        for key in stale:
            del self._entries[key]
        return len(stale)


def reverify_pool(cache: VerdictCache, previous: Sequence[MoasAlert], current: Sequence[MoasAlert]) -> int:
    """Invalidate cached verdicts touched by alerts that appeared or disappeared"""
    changed = set(current) ^ set(previous)
    if not changed:
        return 0
    dropped = cache.invalidate_covered(sorted({a.prefix for a in changed}))
    logger.info("%d alerts changed; %d cached verdicts invalidated", len(changed), dropped)
    return dropped


def safe_combination_fraction(
    snapshot: ConsensusSnapshot,
    request: ConnectionRequest,
    judge: Callable[[Relay, Relay], SafetyVerdict],
    entries: Optional[Sequence[Relay]] = None,
) -> Fraction:
    """Share of compatible (guard, supporting exit) pairs that are safe for ``request``"""
    entries = snapshot.guards if entries is None else entries
    exits = snapshot.supporting_exits(request.dest_ip, request.dest_port)
    pairs = [(en, ex) for en in entries for ex in exits if relays_compatible(en, ex)]
    if not pairs:
        raise NoExitError(f"No usable (entry, exit) pair for {request.dest_ip}:{request.dest_port}", [request.dest_port])
    safe = sum(1 for en, ex in pairs if judge(en, ex).safe)
    return Fraction(safe, len(pairs))


@dataclasses.dataclass(frozen=True)
class Allocation:
    circuit: Circuit
    reused: bool


class CipollinoClient:
    """One client's allocator: pool, on-demand circuits and verdict cache"""

    def __init__(
        self,
        snapshot: ConsensusSnapshot,
        oracle: PathOracle,
        rng: random.Random,
        config: ClientConfig = ClientConfig(),
        alerts: Sequence[MoasAlert] = (),
        mode: ExposureMode = ExposureMode.ASYMMETRIC,
    ):
        self.snapshot = snapshot
        self.oracle = oracle
        self.rng = rng
        self.config = config
        self.mode = mode
        self.alerts: Tuple[MoasAlert, ...] = tuple(alerts)
        self.pool = CircuitPool(target_size=config.pool_target)
        self.on_demand: List[Circuit] = []
        self.built: List[Circuit] = []
        self.cache = VerdictCache()
        self.guard_state = GuardState(config.guard_list_size)
        self.new_id = CircuitIds()

    def entries(self) -> List[Relay]:
        if self.config.pin_guard_list:
            self.guard_state.refresh(self.snapshot, self.rng)
            return self.guard_state.usable(self.snapshot)
        return [r for r in self.snapshot.guards if r.bandwidth > 0]

    def update_alerts(self, alerts: Sequence[MoasAlert]) -> int:
        dropped = reverify_pool(self.cache, self.alerts, alerts)
        self.alerts = tuple(alerts)
        return dropped

    def judge(self, request: ConnectionRequest) -> Callable[[Relay, Relay], SafetyVerdict]:
        return lambda entry, exit_relay: judge_pair(entry, exit_relay, request, self.oracle, self.alerts, self.mode)

    def verdict(self, circuit: Circuit, request: ConnectionRequest) -> SafetyVerdict:
        """Cached verdict of ``circuit`` for the request's destination"""
        self.cache.sync(self.oracle.version)
        topology = self.oracle.topology
        dst_prefix = topology.prefix_for(request.dest_ip)
        dst_asn = topology.ip_to_asn(request.dest_ip)
        if dst_prefix is None or dst_asn is None:
            return UNRESOLVED_VERDICT
        key = (circuit.id, dst_asn, str(dst_prefix))
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        verdict = judge_pair(circuit.entry, circuit.exit, request, self.oracle, self.alerts, self.mode)
        consulted = {dst_prefix}
        consulted.update(p for p in (topology.prefix_for(circuit.entry.address), topology.prefix_for(circuit.exit.address)) if p)
        consulted.update(source_prefixes(topology, request.client_asn, request.client_ip))
        self.cache.put(key, verdict, consulted)
        return verdict

    def expire(self, now: float) -> None:
        for circuit in self.pool.circuits + self.on_demand:
            circuit.expire(now, self.config.dirty_timeout_seconds)
        for circuit in self.on_demand:
            if circuit.state is CircuitState.DIRTY:
                circuit.close()
        self.on_demand = [c for c in self.on_demand if c.live]

    def serve(self, request: ConnectionRequest) -> Allocation:
        """Allocate a safe pooled circuit, or build one for the request"""
        self.expire(request.at)
        entries = self.entries()
        self.built.extend(
            replenish(self.pool, self.snapshot, entries, self.rng, self.new_id, request.at, self.config.max_resample)
        )
        reusable = self.pool.circuits + self.on_demand
        chosen = allocate(reusable, request, lambda c: self.verdict(c, request), self.rng)
        if chosen is not None:
            chosen.mark_used(request.at)
            return Allocation(chosen, reused=True)
        circuit = build_on_demand(
            self.snapshot,
            request,
            self.judge(request),
            self.rng,
            self.new_id,
            entries,
            now=request.at,
            budget=self.config.candidate_budget,
        )
        circuit.mark_used(request.at)
        self.on_demand.append(circuit)
        self.built.append(circuit)
        logger.debug("built %s on demand for %s:%d", circuit.id, request.dest_ip, request.dest_port)
        return Allocation(circuit, reused=False)
