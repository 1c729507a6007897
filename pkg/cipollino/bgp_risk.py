"""
Active adversaries: MOAS feeds, suspect sets and hijack/interception feasibility
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from collections import Counter
from datetime import datetime
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .errors import ArgumentError, ParseError
from .files import Stream, iter_csv_rows, parse_timestamp
from .topology import (
    AsTopology,
    Prefix,
    Relationship,
    RouteClass,
    as_number,
    parse_prefix,
)

logger = logging.getLogger(__name__)

MOAS_HEADER = ("timestamp", "prefix", "origins")


@dataclasses.dataclass(frozen=True)
class MoasAlert:
    """One prefix seen with several origins; registered origin from the prefix table"""

    observed_at: datetime
    prefix: Prefix
    origins: FrozenSet[int]
    registered_origin: Optional[int] = None

    def __post_init__(self):
        if len(self.origins) < 2:
            raise ArgumentError(f"MOAS alert for {self.prefix} needs at least two origins")

    @property
    def verifiable(self) -> bool:
        return self.registered_origin is not None

    @property
    def suspects(self) -> FrozenSet[int]:
        if self.registered_origin is None:
            return self.origins
        return self.origins - {self.registered_origin}


@dataclasses.dataclass(frozen=True)
class SuspectSets:
    h_en: FrozenSet[int] = frozenset()
    h_ex: FrozenSet[int] = frozenset()
    h_src: FrozenSet[int] = frozenset()
    h_dst: FrozenSet[int] = frozenset()

    @property
    def empty(self) -> bool:
        return not (self.h_en or self.h_ex or self.h_src or self.h_dst)


class HijackKind(enum.Enum):
    HIJACK = "hijack"
    INTERCEPTION = "interception"


@dataclasses.dataclass(frozen=True)
class HijackScenario:
    """Attacker originating victim_prefix, judged from observer's point of view"""

    attacker: int
    victim_prefix: Prefix
    observer: int
    kind: HijackKind

    @classmethod
    def build(
        cls,
        topology: AsTopology,
        attacker: int,
        victim_prefix: Prefix,
        observer: int,
        kind: HijackKind = HijackKind.HIJACK,
    ) -> HijackScenario:
        origin = topology.origin_of(victim_prefix)
        if origin is None:
            raise ArgumentError(f"{victim_prefix} has no registered origin")
        if origin == attacker:
            raise ArgumentError(f"AS{attacker} is the registered origin of {victim_prefix}")
        return cls(attacker, victim_prefix, observer, kind)

    def feasible(self, topology: AsTopology) -> bool:
        victim = topology.origin_of(self.victim_prefix)
        if self.kind is HijackKind.HIJACK:
            return hijack_feasible(topology, self.attacker, self.observer, victim)
        return intercept_feasible(topology, self.attacker, self.observer, victim)


def ingest_moas(feed_file: Stream, topology: AsTopology) -> List[MoasAlert]:
    """Parse a ``timestamp,prefix,origins`` CSV feed"""
    alerts = []
    for number, fields in iter_csv_rows(feed_file, MOAS_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected timestamp,prefix,origins, got {fields}", number, "moas")
        try:
            observed_at = parse_timestamp(fields[0])
            prefix = parse_prefix(fields[1])
            origins = frozenset(as_number(o) for o in fields[2].split(";") if o.strip())
        except ArgumentError as e:
            raise ParseError(str(e), number, "moas") from None
        if len(origins) < 2:
            raise ParseError(f"{prefix} has a single origin; not a MOAS conflict", number, "moas")
        registered = topology.origin_of(prefix)
        if registered is None:
            logger.warning("moas:%d: %s is not in the prefix table; all origins are suspects", number, prefix)
        alerts.append(MoasAlert(observed_at, prefix, origins, registered))
    alerts.sort(key=lambda a: (a.observed_at, str(a.prefix)))
    logger.info(
        "ingested %d MOAS alerts (%d unverifiable)",
        len(alerts),
        sum(1 for a in alerts if not a.verifiable),
    )
    return alerts


def suspects_for(
    alerts: Iterable[MoasAlert],
    prefix: Prefix,
    registered_origin: Optional[int] = None,
) -> FrozenSet[int]:
    """Suspect origins of alerts on ``prefix`` or on any prefix covering it"""
    suspects = set()
    for alert in alerts:
        if prefix.subnet_of(alert.prefix):
            suspects |= alert.suspects
    if registered_origin is not None:
        suspects.discard(registered_origin)
    return frozenset(suspects)


def _suspects_at_ip(alerts: Sequence[MoasAlert], topology: AsTopology, ip) -> FrozenSet[int]:
    prefix = topology.prefix_for(ip)
    if prefix is None:
        return frozenset()
    return suspects_for(alerts, prefix, topology.origin_of(prefix))


def source_prefixes(topology: AsTopology, client_asn: int, client_ip=None) -> List[Prefix]:
    """Prefixes standing for the client end: its covering prefix, else all of its AS"""
    if client_ip is not None:
        prefix = topology.prefix_for(client_ip)
        return [prefix] if prefix is not None else []
    return sorted(topology.prefixes_of(client_asn))


def suspect_sets(
    alerts: Sequence[MoasAlert],
    topology: AsTopology,
    entry_ip,
    exit_ip,
    dest_ip,
    client_asn: int,
    client_ip=None,
) -> SuspectSets:
    """H_EN, H_EX, H_SRC and H_DST for one circuit and destination"""
    if not alerts:
        return SuspectSets()
    h_src = set()
    for prefix in source_prefixes(topology, client_asn, client_ip):
        h_src |= suspects_for(alerts, prefix, topology.origin_of(prefix))
    h_src.discard(client_asn)
    return SuspectSets(
        h_en=_suspects_at_ip(alerts, topology, entry_ip),
        h_ex=_suspects_at_ip(alerts, topology, exit_ip),
        h_src=frozenset(h_src),
        h_dst=_suspects_at_ip(alerts, topology, dest_ip),
    )


@dataclasses.dataclass(frozen=True)
class _AttackState:
    captured: FrozenSet[int]
    attacker_can_forward: bool


def _attack_state(topology: AsTopology, attacker: int, victim: int) -> _AttackState:
    return topology.memo("attack_state", _converge_attack)(attacker, victim)


def _converge_attack(topology: AsTopology, attacker: int, victim: int) -> _AttackState:
    """Converged routing when attacker and victim both originate the victim prefix"""
    table = topology.route_table((attacker, victim))
    reached = topology.origins_reached(table)
    # Ties count as captured: the attacker wins every tie.
    captured = frozenset(asn for asn, origins in reached.items() if attacker in origins and asn != attacker)

    can_forward = False
    for neighbor in sorted(topology.g[attacker]):
        route = table.get(neighbor)
        if route is None or neighbor in captured:
            continue
        exports = route.route_class >= RouteClass.CUSTOMER or topology.relationship(neighbor, attacker) == Relationship.P2C
        if exports:
            can_forward = True
            break
    return _AttackState(captured, can_forward)


def _check_attack_args(topology: AsTopology, attacker: int, source: int, victim: int) -> None:
    for asn in (attacker, source, victim):
        topology.require(asn)
    if attacker == victim:
        raise ArgumentError(f"Attacker AS{attacker} is the victim itself")


def hijack_feasible(topology: AsTopology, attacker: int, source: int, victim: int) -> bool:
    """Does source route to attacker once attacker originates victim's prefix?"""
    _check_attack_args(topology, attacker, source, victim)
    if source in (victim, attacker):
        return False
    return source in _attack_state(topology, attacker, victim).captured


def intercept_feasible(topology: AsTopology, attacker: int, source: int, victim: int) -> bool:
    """Hijack that still lets the attacker forward traffic on to the victim"""
    if not hijack_feasible(topology, attacker, source, victim):
        return False
    return _attack_state(topology, attacker, victim).attacker_can_forward


@dataclasses.dataclass(frozen=True)
class AttackTally:
    asn: int
    attempts: int
    hijacks: int
    intercepts: int

    @property
    def hijack_fraction(self) -> float:
        return self.hijacks / self.attempts if self.attempts else 0.0

    @property
    def intercept_fraction(self) -> float:
        return self.intercepts / self.attempts if self.attempts else 0.0


@dataclasses.dataclass(frozen=True)
class AttackMatrix:
    attackers: Tuple[AttackTally, ...]
    victims: Tuple[AttackTally, ...]

    def attacker_rows(self) -> List[Tuple[int, float, float]]:
        """Rows for ``attacker_asn,hijack_fraction,intercept_fraction``"""
        return [(t.asn, t.hijack_fraction, t.intercept_fraction) for t in self.attackers]

    def victim_rows(self) -> List[Tuple[int, int, float]]:
        """Rows for ``victim_asn,attempts,success_fraction``"""
        return [(t.asn, t.attempts, t.hijack_fraction) for t in self.victims]


def attack_success_matrix(
    topology: AsTopology,
    attackers: Iterable[int],
    pairs: Sequence[Tuple[int, int]],
) -> AttackMatrix:
    """Hijack/interception success per attacker and per victim.

    Attempts where the attacker is the source or the victim are not counted.
    """
    attackers = sorted(set(attackers))
    if not attackers or not pairs:
        raise ArgumentError("attack_success_matrix needs attackers and (source, victim) pairs")
    by_attacker = {a: Counter() for a in attackers}
    by_victim: Dict[int, Counter] = {}
    for attacker in attackers:
        for source, victim in pairs:
            if attacker in (source, victim):
                continue
            hijack = hijack_feasible(topology, attacker, source, victim)
            intercept = hijack and intercept_feasible(topology, attacker, source, victim)
            for tally in (by_attacker[attacker], by_victim.setdefault(victim, Counter())):
                tally["attempts"] += 1
                tally["hijacks"] += int(hijack)
                tally["intercepts"] += int(intercept)

    def freeze(asn, c):
        return AttackTally(asn, c["attempts"], c["hijacks"], c["intercepts"])

    matrix = AttackMatrix(
        tuple(freeze(a, by_attacker[a]) for a in attackers),
        tuple(freeze(v, by_victim[v]) for v in sorted(by_victim)),
    )
    logger.info("evaluated %d attackers over %d pairs", len(attackers), len(pairs))
    return matrix


class MoasFeed:
    """Replays alerts in observation order, refreshing once per interval"""

    def __init__(self, alerts: Iterable[MoasAlert], interval_seconds: int = 3600):
        if interval_seconds <= 0:
            raise ArgumentError("feed interval must be positive")
        self.alerts = sorted(alerts, key=lambda a: (a.observed_at, str(a.prefix)))
        self.interval = interval_seconds
        self._tick: Optional[int] = None
        self._active: Tuple[MoasAlert, ...] = ()

    @property
    def active(self) -> Tuple[MoasAlert, ...]:
        return self._active

    def advance(self, now: float) -> bool:
        """Move the feed clock to ``now``; True when the active alert list changed"""
        tick = math.floor(now / self.interval)
        if tick == self._tick:
            return False
        self._tick = tick
        boundary = tick * self.interval
        active = tuple(a for a in self.alerts if a.observed_at.timestamp() <= boundary)
        changed = active != self._active
        self._active = active
        if changed:
            logger.debug("feed tick %d: %d active alerts", tick, len(active))
        return changed
