"""
Client-model replay over a consensus snapshot and the reports built from it
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import random
from datetime import datetime
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .bgp_risk import MoasAlert, MoasFeed
from .circuits import (
    Allocation,
    CipollinoClient,
    ConnectionRequest,
    ExposureMode,
    SafetyVerdict,
    build_on_demand,
    judge_pair,
)
from .config import ClientConfig
from .errors import ArgumentError, NoExitError, ParseError, SelectionError
from .files import Stream, iter_csv_rows
from .pathcache import PathOracle, PredictionBasis
from .tor_net import (
    Circuit,
    CircuitIds,
    CircuitState,
    ConsensusSnapshot,
    GuardState,
    Relay,
    relay_counts,
    vanilla_build,
    vanilla_pool_maintain,
)
from .topology import as_number
from .workload import WorkloadStream

logger = logging.getLogger(__name__)

TRUTH_HEADER = ("src_asn", "dst_asn", "path")
LOAD_PERCENTILES = (10, 25, 50, 75, 90, 100)


class ClientKind(enum.Enum):
    VANILLA = "vanilla"
    PER_DESTINATION = "perdest"
    CIPOLLINO = "cipollino"


@dataclasses.dataclass(frozen=True)
class ClientModel:
    kind: ClientKind
    config: ClientConfig = ClientConfig()


class VanillaClient:
    """Reuses any live circuit whose exit supports the request; ignores AS exposure"""

    def __init__(self, snapshot: ConsensusSnapshot, rng: random.Random, config: ClientConfig = ClientConfig()):
        self.snapshot = snapshot
        self.rng = rng
        self.config = config
        self.pool: List[Circuit] = []
        self.built: List[Circuit] = []
        self.recent_ports: Dict[int, float] = {}
        self.guard_state = GuardState(config.guard_list_size)
        self.new_id = CircuitIds()

    def update_alerts(self, alerts: Sequence[MoasAlert]) -> int:
        return 0

    def _expire(self, now: float) -> None:
        for circuit in self.pool:
            circuit.expire(now, self.config.dirty_timeout_seconds)
            if circuit.state is CircuitState.DIRTY:
                circuit.close()
        self.pool = [c for c in self.pool if c.live]

    def _reusable(self, request: ConnectionRequest) -> Optional[Circuit]:
        for circuit in sorted(self.pool, key=lambda c: (c.built_at, c.id), reverse=True):
            if circuit.live and circuit.supports(request.dest_ip, request.dest_port):
                return circuit
        return None

    def serve(self, request: ConnectionRequest) -> Allocation:
        now = request.at
        self._expire(now)
        chosen = self._reusable(request)
        reused = chosen is not None
        if chosen is None:
            chosen = vanilla_build(
                self.snapshot,
                self.guard_state,
                request.dest_ip,
                request.dest_port,
                self.rng,
                self.new_id,
                now,
                self.config.max_resample,
            )
            self.pool.append(chosen)
            self.built.append(chosen)
        chosen.mark_used(now)

        self.recent_ports[request.dest_port] = now
        before = len(self.pool)
        try:
            vanilla_pool_maintain(
                self.snapshot,
                self.pool,
                self.recent_ports,
                now,
                self.rng,
                self.guard_state,
                self.new_id,
                self.config.port_history_seconds,
                self.config.circuits_per_port,
                self.config.max_resample,
            )
        except NoExitError as e:
            logger.warning("vanilla pre-building incomplete: %s", e)
        finally:
            self.built.extend(self.pool[before:])
        return Allocation(chosen, reused)


class PerDestinationClient:
    """Builds a destination-aware circuit for every new destination AS"""

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
        self.alerts = tuple(alerts)
        self.by_destination: Dict[Union[int, str], Circuit] = {}
        self.built: List[Circuit] = []
        self.new_id = CircuitIds()

    def update_alerts(self, alerts: Sequence[MoasAlert]) -> int:
        self.alerts = tuple(alerts)
        return 0

    def serve(self, request: ConnectionRequest) -> Allocation:
        now = request.at
        dst_asn = self.oracle.topology.ip_to_asn(request.dest_ip)
        key: Union[int, str] = dst_asn if dst_asn is not None else str(request.dest_ip)
        cached = self.by_destination.get(key)
        if cached is not None:
            cached.expire(now, self.config.dirty_timeout_seconds)
            if cached.live and cached.supports(request.dest_ip, request.dest_port):
                cached.mark_used(now)
                return Allocation(cached, reused=True)
        circuit = build_on_demand(
            self.snapshot,
            request,
            lambda en, ex: judge_pair(en, ex, request, self.oracle, self.alerts, self.mode),
            self.rng,
            self.new_id,
            [r for r in self.snapshot.guards if r.bandwidth > 0],
            now=now,
            budget=self.config.candidate_budget,
        )
        circuit.mark_used(now)
        self.by_destination[key] = circuit
        self.built.append(circuit)
        return Allocation(circuit, reused=False)


def make_client(
    model: ClientModel,
    snapshot: ConsensusSnapshot,
    oracle: PathOracle,
    rng: random.Random,
    alerts: Sequence[MoasAlert] = (),
):
    if model.kind is ClientKind.VANILLA:
        return VanillaClient(snapshot, rng, model.config)
    if model.kind is ClientKind.PER_DESTINATION:
        return PerDestinationClient(snapshot, oracle, rng, model.config, alerts)
    return CipollinoClient(snapshot, oracle, rng, model.config, alerts)


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    request_index: int
    at: float
    dest_ip: str
    dest_port: int
    circuit_id: Optional[str] = None
    reused: Optional[bool] = None
    safe: Optional[bool] = None
    adversaries: Tuple[int, ...] = ()
    forward_safe: Optional[bool] = None
    unsafe_fallback: bool = False
    error: Optional[str] = None

    @property
    def served(self) -> bool:
        return self.circuit_id is not None

    def as_dict(self) -> Dict[str, object]:
        record = dataclasses.asdict(self)
        record["at"] = round(self.at, 3)
        record["adversaries"] = list(self.adversaries)
        return record


@dataclasses.dataclass(frozen=True)
class SimReport:
    model: str
    requests: int
    served: int
    vulnerable_circuit_fraction: float
    vulnerable_request_fraction: float
    forward_only_request_fraction: float
    unique_relays: int
    per_relay_load: Mapping[str, int]
    allocations_reused: int
    allocations_built: int
    fallback_allocations: int
    no_exit_errors: int
    failed_requests: int

    def summary_rows(self) -> List[Tuple[str, object]]:
        """Rows for the ``metric,value`` summary CSV"""
        return [
            ("model", self.model),
            ("requests", self.requests),
            ("served", self.served),
            ("vulnerable_circuit_fraction", self.vulnerable_circuit_fraction),
            ("vulnerable_request_fraction", self.vulnerable_request_fraction),
            ("forward_only_request_fraction", self.forward_only_request_fraction),
            ("unique_relays", self.unique_relays),
            ("allocations_reused", self.allocations_reused),
            ("allocations_built", self.allocations_built),
            ("fallback_allocations", self.fallback_allocations),
            ("no_exit_errors", self.no_exit_errors),
            ("failed_requests", self.failed_requests),
        ]


@dataclasses.dataclass(frozen=True)
class SimResult:
    report: SimReport
    trace: Tuple[TraceRecord, ...]


def _ratio(part: int, whole: int) -> float:
    return part / whole if whole else 0.0


def summarize(model: str, trace: Sequence[TraceRecord], built: Iterable[Circuit]) -> SimReport:
    """Aggregate a per-request trace and the circuits a client built"""
    served = [t for t in trace if t.served]
    unsafe_by_circuit: Dict[str, bool] = {}
    for t in served:
        unsafe_by_circuit[t.circuit_id] = unsafe_by_circuit.get(t.circuit_id, False) or not t.safe
    load = relay_counts(built)
    fallback_ids = {t.circuit_id for t in served if t.unsafe_fallback and not t.reused}
    return SimReport(
        model=model,
        requests=len(trace),
        served=len(served),
        vulnerable_circuit_fraction=_ratio(sum(unsafe_by_circuit.values()), len(unsafe_by_circuit)),
        vulnerable_request_fraction=_ratio(sum(1 for t in served if not t.safe), len(served)),
        forward_only_request_fraction=_ratio(sum(1 for t in served if not t.forward_safe), len(served)),
        unique_relays=len(load),
        per_relay_load=MappingProxyType(dict(sorted(load.items()))),
        allocations_reused=sum(1 for t in served if t.reused),
        allocations_built=sum(1 for t in served if not t.reused),
        fallback_allocations=len(fallback_ids),
        no_exit_errors=sum(1 for t in trace if t.error == "no-exit"),
        failed_requests=len(trace) - len(served),
    )


def run_simulation(
    model: ClientModel,
    workload: WorkloadStream,
    snapshot: ConsensusSnapshot,
    oracle: PathOracle,
    alerts: Sequence[MoasAlert],
    rng: random.Random,
) -> SimResult:
    """Replay every request through the client model.

    Each served request is judged from scratch under both adversary models,
    whatever the client used to choose its circuit.
    """
    feed = MoasFeed(alerts, model.config.feed_interval_seconds)
    client = make_client(model, snapshot, oracle, rng)
    trace = []
    for index, request in enumerate(workload.requests):
        if feed.advance(request.at):
            client.update_alerts(feed.active)
        base = dict(request_index=index, at=request.at, dest_ip=str(request.dest_ip), dest_port=request.dest_port)
        try:
            allocation = client.serve(request)
        except NoExitError as e:
            logger.debug("request %d: %s", index, e)
            trace.append(TraceRecord(**base, error="no-exit"))
            continue
        except SelectionError as e:
            logger.warning("request %d: %s", index, e)
            trace.append(TraceRecord(**base, error="selection"))
            continue
        circuit = allocation.circuit
        verdict: SafetyVerdict = judge_pair(circuit.entry, circuit.exit, request, oracle, feed.active, ExposureMode.ASYMMETRIC)
        forward = judge_pair(circuit.entry, circuit.exit, request, oracle, feed.active, ExposureMode.FORWARD_ONLY)
        trace.append(
            TraceRecord(
                **base,
                circuit_id=circuit.id,
                reused=allocation.reused,
                safe=verdict.safe,
                adversaries=tuple(sorted(verdict.adversaries)),
                forward_safe=forward.safe,
                unsafe_fallback=circuit.unsafe_fallback,
            )
        )
    report = summarize(model.kind.value, trace, client.built)
    logger.info(
        "%s: %d/%d requests served, %.3f vulnerable, %d unique relays",
        report.model,
        report.served,
        report.requests,
        report.vulnerable_request_fraction,
        report.unique_relays,
    )
    return SimResult(report, tuple(trace))


@dataclasses.dataclass(frozen=True)
class AdversaryComparison:
    forward_only_fraction: float
    asymmetric_fraction: float
    flipped_circuits: Tuple[str, ...]

    @property
    def gap(self) -> float:
        return self.asymmetric_fraction - self.forward_only_fraction


def vulnerable_fraction(result: SimResult, mode: ExposureMode) -> float:
    served = [t for t in result.trace if t.served]
    if mode is ExposureMode.FORWARD_ONLY:
        return _ratio(sum(1 for t in served if not t.forward_safe), len(served))
    return _ratio(sum(1 for t in served if not t.safe), len(served))


def compare_adversary_models(result: SimResult) -> AdversaryComparison:
    """Forward-only versus asymmetric vulnerability of the same replayed circuits"""
    flipped = sorted({t.circuit_id for t in result.trace if t.served and t.forward_safe and not t.safe})
    return AdversaryComparison(
        vulnerable_fraction(result, ExposureMode.FORWARD_ONLY),
        vulnerable_fraction(result, ExposureMode.ASYMMETRIC),
        tuple(flipped),
    )


@dataclasses.dataclass(frozen=True)
class AccuracyRow:
    src: int
    dst: int
    basis: PredictionBasis
    over: int
    under: int


@dataclasses.dataclass(frozen=True)
class AccuracyReport:
    rows: Tuple[AccuracyRow, ...]
    skipped: int

    def histogram(self) -> List[Tuple[str, str, int, int]]:
        """Rows for the ``basis,direction,ases,paths`` CSV"""
        counts: Dict[Tuple[str, str, int], int] = {}
        for row in self.rows:
            for direction, ases in (("over", row.over), ("under", row.under)):
                key = (row.basis.value, direction, ases)
                counts[key] = counts.get(key, 0) + 1
        return [(basis, direction, ases, n) for (basis, direction, ases), n in sorted(counts.items())]


def load_truth_paths(truth_file: Stream) -> List[Tuple[int, int, Tuple[int, ...], int]]:
    paths = []
    for number, fields in iter_csv_rows(truth_file, TRUTH_HEADER):
        if len(fields) != 3:
            raise ParseError(f"expected src_asn,dst_asn,path, got {fields}", number, "truth")
        try:
            path = tuple(as_number(a) for a in fields[2].split("-") if a.strip())
            paths.append((as_number(fields[0]), as_number(fields[1]), path, number))
        except ArgumentError as e:
            raise ParseError(str(e), number, "truth") from None
    return paths


def path_accuracy_report(oracle: PathOracle, truth_file: Stream) -> AccuracyReport:
    """Over- and under-estimated ASes of each prediction against known paths"""
    rows = []
    skipped = 0
    topology = oracle.topology
    for src, dst, path, number in load_truth_paths(truth_file):
        if src not in topology or dst not in topology:
            logger.warning("truth:%d: AS%d or AS%d not in topology; skipped", number, src, dst)
            skipped += 1
            continue
        prediction = oracle.predict(src, dst)
        truth = set(path) | {src, dst}
        rows.append(
            AccuracyRow(src, dst, prediction.basis, len(prediction.ases - truth), len(truth - prediction.ases))
        )
    logger.info("compared %d predictions against truth (%d skipped)", len(rows), skipped)
    return AccuracyReport(tuple(rows), skipped)


def relay_load_distribution(
    report: SimReport,
    snapshot: ConsensusSnapshot,
    percentiles: Sequence[int] = LOAD_PERCENTILES,
) -> List[Tuple[int, float]]:
    """Bandwidth percentiles of selected relays, weighted by selection count"""
    bandwidths = []
    counts = []
    for fingerprint, count in report.per_relay_load.items():
        relay: Optional[Relay] = snapshot.get(fingerprint)
        if relay is not None:
            bandwidths.append(relay.bandwidth)
            counts.append(count)
    if not bandwidths:
        return []
    samples = np.repeat(np.asarray(bandwidths, dtype=float), counts)
    return [(pct, float(np.percentile(samples, pct))) for pct in percentiles]


def run_history(
    model: ClientModel,
    workload: WorkloadStream,
    snapshots: Sequence[ConsensusSnapshot],
    oracle: PathOracle,
    alerts: Sequence[MoasAlert],
    seed: int,
) -> List[Tuple[datetime, SimReport]]:
    """One independent run per consensus snapshot, each seeded identically"""
    if not snapshots:
        raise ArgumentError("run_history needs at least one consensus snapshot")
    history = []
    for snapshot in sorted(snapshots, key=lambda s: s.valid_at):
        result = run_simulation(model, workload, snapshot, oracle, alerts, random.Random(seed))
        history.append((snapshot.valid_at, result.report))
    return history
