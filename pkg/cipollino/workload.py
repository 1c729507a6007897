"""
Connection-request streams: web and mixed-application models, CSV storage
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import random
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

from .circuits import ConnectionRequest
from .errors import ArgumentError, GenerationError, ParseError
from .files import Stream, iter_csv_rows, parse_timestamp
from .topology import IPv4, parse_ip

logger = logging.getLogger(__name__)

SITE_HEADER = ("site", "rank")
DNS_HEADER = ("site", "ip", "port")
PROFILE_HEADER = ("application", "ports", "rate_per_hour", "destinations")
WORKLOAD_HEADER = ("at", "dest_ip", "dest_port")

DEFAULT_PORTS: Dict[str, Tuple[int, ...]] = {
    "web": (80, 443),
    "p2p": (6881,),
    "mail": (25, 587),
    "irc": (6667,),
}


class WorkloadLabel(enum.Enum):
    WEB = "web"
    MIXED = "mixed"


@dataclasses.dataclass(frozen=True)
class WorkloadStream:
    requests: Tuple[ConnectionRequest, ...]
    label: WorkloadLabel

    def __post_init__(self):
        for earlier, later in zip(self.requests, self.requests[1:]):
            if later.at < earlier.at:
                raise ArgumentError(f"Workload timestamps go backwards at {later.at}")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def span_seconds(self) -> float:
        if not self.requests:
            return 0.0
        return self.requests[-1].at - self.requests[0].at


@dataclasses.dataclass(frozen=True)
class AppProfile:
    application: str
    ports: Tuple[int, ...]
    rate_per_hour: float
    destinations: Tuple[IPv4, ...]

    def __post_init__(self):
        if self.rate_per_hour < 0:
            raise ArgumentError(f"{self.application}: rate must not be negative")
        if self.rate_per_hour > 0 and not (self.ports and self.destinations):
            raise ArgumentError(f"{self.application}: needs ports and destinations")


def load_sites(site_list: Stream) -> List[str]:
    """Sites of a ``site,rank`` list ordered by rank"""
    ranked = []
    for number, fields in iter_csv_rows(site_list, SITE_HEADER):
        if len(fields) != 2 or not fields[0]:
            raise ParseError(f"expected site,rank, got {fields}", number, "sites")
        try:
            ranked.append((int(fields[1]), fields[0]))
        except ValueError:
            raise ParseError(f"rank must be an integer: {fields[1]!r}", number, "sites") from None
    return [site for _, site in sorted(ranked)]


def load_dns_map(dns_map: Stream) -> Dict[str, List[Tuple[IPv4, int]]]:
    """Endpoints per site from a ``site,ip,port`` map, in file order"""
    endpoints: Dict[str, List[Tuple[IPv4, int]]] = {}
    for number, fields in iter_csv_rows(dns_map, DNS_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected site,ip,port, got {fields}", number, "dns")
        try:
            endpoint = (parse_ip(fields[1]), int(fields[2]))
        except (ArgumentError, ValueError) as e:
            raise ParseError(str(e), number, "dns") from None
        endpoints.setdefault(fields[0], []).append(endpoint)
    return endpoints


def generate_web_workload(
    site_list: Stream,
    dns_map: Stream,
    start: datetime,
    rng: random.Random,
    client_asn: int,
    mean_gap_seconds: float = 10.0,
    client_ip: Optional[IPv4] = None,
) -> WorkloadStream:
    """One burst of requests per site, exponential gaps between sites"""
    sites = load_sites(site_list)
    if not sites:
        raise GenerationError("Site list is empty")
    endpoints = load_dns_map(dns_map)
    if mean_gap_seconds <= 0:
        raise ArgumentError("mean gap must be positive")

    requests = []
    now = start.timestamp()
    for index, site in enumerate(sites):
        if not endpoints.get(site):
            raise GenerationError(f"Site {site!r} has no entry in the DNS map")
        if index:
            now += rng.expovariate(1.0 / mean_gap_seconds)
        for ip, port in endpoints[site]:
            requests.append(ConnectionRequest(now, ip, port, client_asn, client_ip))
    logger.info("generated web workload: %d sites, %d requests", len(sites), len(requests))
    return WorkloadStream(tuple(requests), WorkloadLabel.WEB)


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.split(";") if p.strip())


def load_profile(profile: Stream) -> List[AppProfile]:
    """Parse ``application,ports,rate_per_hour,destinations`` rows.

    Ports and destinations are ``;``-separated; empty ports take the
    application's default ports.
    """
    profiles = []
    for number, fields in iter_csv_rows(profile, PROFILE_HEADER):
        if len(fields) != 4:
            raise ParseError(f"expected {','.join(PROFILE_HEADER)}, got {fields}", number, "profile")
        application = fields[0].lower()
        try:
            ports = _int_list(fields[1]) or DEFAULT_PORTS.get(application, ())
            rate = float(fields[2])
            destinations = tuple(parse_ip(d) for d in fields[3].split(";") if d.strip())
            profiles.append(AppProfile(application, ports, rate, destinations))
        except (ArgumentError, ValueError) as e:
            raise ParseError(str(e), number, "profile") from None
    return profiles


def mixed_workload(
    profiles: Sequence[AppProfile],
    duration_seconds: int,
    rng: random.Random,
    client_asn: int,
    start: float = 0.0,
    client_ip: Optional[IPv4] = None,
) -> WorkloadStream:
    """Merge one Poisson request process per application"""
    if duration_seconds < 0:
        raise ArgumentError("duration must not be negative")
    if sum(p.rate_per_hour for p in profiles) <= 0:
        raise ArgumentError("Profile has zero total request rate")

    events = []
    for order, profile in enumerate(profiles):
        if profile.rate_per_hour <= 0:
            continue
        rate = profile.rate_per_hour / 3600.0
        t = rng.expovariate(rate)
        while t < duration_seconds:
            port = rng.choice(profile.ports)
            dest = rng.choice(profile.destinations)
            events.append((t, order, dest, port))
            t += rng.expovariate(rate)
    events.sort(key=lambda e: (e[0], e[1]))
    requests = tuple(ConnectionRequest(start + t, dest, port, client_asn, client_ip) for t, _, dest, port in events)
    logger.info("generated mixed workload: %d requests over %ds", len(requests), duration_seconds)
    return WorkloadStream(requests, WorkloadLabel.MIXED)


def generate_mixed_workload(
    profile: Stream,
    duration_seconds: int,
    rng: random.Random,
    client_asn: int,
    start: float = 0.0,
    client_ip: Optional[IPv4] = None,
) -> WorkloadStream:
    return mixed_workload(load_profile(profile), duration_seconds, rng, client_asn, start, client_ip)


def _parse_at(text: str) -> float:
    if "T" in text:
        return parse_timestamp(text).timestamp()
    return float(text)


def read_workload(
    stream: Stream,
    client_asn: int,
    label: WorkloadLabel = WorkloadLabel.WEB,
    client_ip: Optional[IPv4] = None,
) -> WorkloadStream:
    """Read an ``at,dest_ip,dest_port`` CSV; ``at`` is epoch seconds or RFC3339"""
    requests = []
    for number, fields in iter_csv_rows(stream, WORKLOAD_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected at,dest_ip,dest_port, got {fields}", number, "workload")
        try:
            requests.append(ConnectionRequest(_parse_at(fields[0]), fields[1], int(fields[2]), client_asn, client_ip))
        except (ArgumentError, ValueError) as e:
            raise ParseError(str(e), number, "workload") from None
    requests.sort(key=lambda r: r.at)
    return WorkloadStream(tuple(requests), label)


def workload_rows(workload: WorkloadStream) -> List[Tuple[str, str, int]]:
    """Rows for the ``at,dest_ip,dest_port`` CSV"""
    return [(f"{r.at:.3f}", str(r.dest_ip), r.dest_port) for r in workload.requests]
