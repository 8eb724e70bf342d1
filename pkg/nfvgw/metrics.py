"""
Scenario event trace, trace verification and the metrics report.

The trace is a list of flat JSON objects ``{"t", "seq", "kind", ...}`` ordered by ``seq``.
It is the single source for every acceptance check, so it carries scenario time only.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import orjson
import structlog

from .clock import Scheduler
from .errors import IllegalTransition
from .lifecycle import lifecycle_next
from .types import AnyObject, LifecycleEvent, LifecycleState
from .utils import percentile

logger = structlog.get_logger(__name__)

Event = AnyObject
Listener = Callable[[Event], None]

CONTROL_ORDER = ("rq-s", "rq-g", "g-i", "ack")
BREAKDOWN_KEYS = ("ingress", "stage0", "stage1", "egress")


class TraceRecorder:
    """Append-only event log stamped with scenario time."""

    def __init__(self, clock: Optional[Scheduler] = None):
        self.clock = clock
        self.events: List[Event] = []
        self._listeners: List[Listener] = []

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def record(self, kind: str, **fields: object) -> Event:
        event: Event = {
            "t": self.clock.now_ms if self.clock is not None else 0,
            "seq": len(self.events) + 1,
            "kind": kind,
        }
        event.update(fields)
        self.events.append(event)
        for listener in list(self._listeners):
            listener(event)
        return event

    def of_kind(self, kind: str) -> List[Event]:
        return [event for event in self.events if event["kind"] == kind]

    def to_jsonl(self) -> bytes:
        option = orjson.OPT_APPEND_NEWLINE
        return b"".join(orjson.dumps(event, option=option) for event in self.events)

    def write_jsonl(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_jsonl())
        logger.info("Trace written", path=str(path), events=len(self.events))


def load_trace(path: Union[str, Path]) -> List[Event]:
    lines = Path(path).read_bytes().splitlines()
    return [orjson.loads(line) for line in lines if line.strip()]


def _order_key(event: Event) -> Tuple[int, int]:
    return (event["t"], event["seq"])


def _causal_order(events: Sequence[Event]) -> List[str]:
    violations: List[str] = []
    legs: Dict[Tuple[str, str], Dict[str, Event]] = defaultdict(dict)
    for event in events:
        if event["kind"] != "control" or event.get("purpose", "service") != "service":
            continue
        if event.get("duplicate"):
            continue
        legs[(event["provider"], event["request_id"])].setdefault(event["iface"], event)

    for (provider, request_id), seen in sorted(legs.items()):
        previous: Optional[Event] = None
        missing: Optional[str] = None
        # a rejection may short-cut the sequence
        rejected = seen.get("ack", {}).get("status", "ready") != "ready"
        for iface in CONTROL_ORDER:
            current = seen.get(iface)
            if current is None:
                missing = missing or iface
                continue
            if missing is not None and not rejected:
                violations.append(
                    f"causal order: {provider}/{request_id} has {iface} but no {missing}"
                )
            elif previous is not None and _order_key(previous) >= _order_key(current):
                violations.append(
                    f"causal order: {provider}/{request_id} "
                    f"{previous['iface']} is not before {iface}"
                )
            previous = current
    return violations


def _stage_order(events: Sequence[Event]) -> List[str]:
    violations: List[str] = []
    for event in events:
        if event["kind"] != "delivery" or not event.get("valid", True):
            continue
        stages = event.get("stages") or []
        ok = (
            len(stages) == 2
            and stages[0].startswith("IMP")
            and stages[1].startswith("PC")
            and stages[0][-1] == stages[1][-1]
        )
        if not ok:
            violations.append(f"stage order: {event.get('trace_id')} passed {stages}")
    return violations


def _lifecycle_replay(events: Sequence[Event]) -> List[str]:
    violations: List[str] = []
    current: Dict[str, LifecycleState] = {}
    for event in events:
        if event["kind"] != "lifecycle":
            continue
        instance_id = event["instance_id"]
        before = LifecycleState(event["from"])
        after = LifecycleState(event["to"])
        expected_before = current.get(instance_id, LifecycleState.REQUESTED)
        if before is not expected_before:
            violations.append(
                f"lifecycle replay: {instance_id} left {before.value} "
                f"while recorded as {expected_before.value}"
            )
        try:
            replayed = lifecycle_next(before, LifecycleEvent(event["event"]))
        except IllegalTransition:
            violations.append(
                f"lifecycle replay: {instance_id} {event['event']} is illegal from {before.value}"
            )
        else:
            if replayed is not after:
                violations.append(
                    f"lifecycle replay: {instance_id} reached {after.value}, table says "
                    f"{replayed.value}"
                )
        current[instance_id] = after
    return violations


def _capacity_conservation(events: Sequence[Event]) -> List[str]:
    violations: List[str] = []
    tally: Dict[str, Tuple[int, int]] = {}
    for event in events:
        if event["kind"] != "allocation":
            continue
        node_id = event["node_id"]
        cpu_cap, mem_cap = event["cpu_capacity"], event["mem_capacity"]
        free_cpu, free_mem = tally.get(node_id, (cpu_cap, mem_cap))
        sign = -1 if event["op"] == "allocate" else 1
        free_cpu += sign * event["cpu"]
        free_mem += sign * event["mem"]
        tally[node_id] = (free_cpu, free_mem)
        if (free_cpu, free_mem) != (event["free_cpu"], event["free_mem"]):
            violations.append(f"capacity conservation: {node_id} free capacity diverged")
        if not (0 <= free_cpu <= cpu_cap and 0 <= free_mem <= mem_cap):
            violations.append(
                f"capacity conservation: {node_id} free ({free_cpu}, {free_mem}) out of range"
            )
    return violations


def _interface_discipline(events: Sequence[Event]) -> List[str]:
    violations: List[str] = []
    valid_chains = set()
    for event in events:
        if event["kind"] == "chain" and event.get("valid"):
            valid_chains.add((event["provider"], event["request_id"]))
        elif event["kind"] == "control" and event["iface"] == "ack" and not event.get("duplicate"):
            key = (event["provider"], event["request_id"])
            if event.get("status") == "ready" and key not in valid_chains:
                violations.append(
                    f"interface discipline: ACK ready for {key[0]}/{key[1]} without a valid chain"
                )
    return violations


def verify_trace(events: Iterable[Event]) -> List[str]:
    """Check a scenario trace. An empty list means every check passed."""
    ordered = sorted(events, key=lambda event: event["seq"])
    return (
        _causal_order(ordered)
        + _stage_order(ordered)
        + _lifecycle_replay(ordered)
        + _capacity_conservation(ordered)
        + _interface_discipline(ordered)
    )


@dataclass
class LatencyStats:
    p50: float
    p95: float
    max: float
    mean: float

    @classmethod
    def of(cls, values: Sequence[float]) -> Optional["LatencyStats"]:
        if not values:
            return None
        return cls(
            p50=percentile(values, 50),
            p95=percentile(values, 95),
            max=max(values),
            mean=round(mean(values), 3),
        )


@dataclass
class MetricsReport:
    emitted: int
    delivered: int
    lost: int
    in_flight: int
    invalid: int
    duplicates: int
    latency_ms: Optional[LatencyStats]
    throughput: float  # delivered messages per second of active time
    overhead: Optional[float]  # control messages per delivered message
    control_messages: int
    active_duration_ms: int
    delivered_by_domain: Dict[str, int] = field(default_factory=dict)
    control_by_iface: Dict[str, int] = field(default_factory=dict)
    breakdown_ms: Dict[str, float] = field(default_factory=dict)
    instance_series: List[AnyObject] = field(default_factory=list)
    migrations: List[AnyObject] = field(default_factory=list)

    def to_dict(self) -> AnyObject:
        return {
            "emitted": self.emitted,
            "delivered": self.delivered,
            "lost": self.lost,
            "in_flight": self.in_flight,
            "invalid": self.invalid,
            "duplicates": self.duplicates,
            "latency_ms": self.latency_ms.__dict__ if self.latency_ms else None,
            "throughput": self.throughput,
            "overhead": self.overhead,
            "control_messages": self.control_messages,
            "active_duration_ms": self.active_duration_ms,
            "delivered_by_domain": self.delivered_by_domain,
            "control_by_iface": self.control_by_iface,
            "breakdown_ms": self.breakdown_ms,
            "instance_series": self.instance_series,
            "migrations": self.migrations,
        }

    def to_json(self) -> bytes:
        return orjson.dumps(self.to_dict(), option=orjson.OPT_INDENT_2)


def build_report(events: Sequence[Event]) -> MetricsReport:
    emits = [e for e in events if e["kind"] == "emit"]
    deliveries = [e for e in events if e["kind"] == "delivery"]
    good = [e for e in deliveries if e.get("valid") and not e.get("duplicate")]
    invalid = sum(1 for e in deliveries if not e.get("valid"))
    duplicates = sum(1 for e in deliveries if e.get("duplicate"))
    lost = sum(1 for e in events if e["kind"] in ("drop", "loss"))
    controls = [e for e in events if e["kind"] == "control"]

    delivered = len(good)
    active_ms = 0
    if emits and good:
        active_ms = max(1, max(e["t"] for e in good) - min(e["t"] for e in emits))
    throughput = round(delivered * 1000 / active_ms, 6) if active_ms else 0.0

    breakdown: Dict[str, float] = {}
    if good:
        for key in BREAKDOWN_KEYS:
            parts = [e["breakdown"][key] for e in good if e.get("breakdown")]
            if parts:
                breakdown[key] = round(mean(parts), 3)

    return MetricsReport(
        emitted=len(emits),
        delivered=delivered,
        lost=lost,
        in_flight=len(emits) - delivered - lost,
        invalid=invalid,
        duplicates=duplicates,
        latency_ms=LatencyStats.of(
            [e["latency_ms"] for e in good if e.get("latency_ms") is not None]
        ),
        throughput=throughput,
        overhead=round(len(controls) / delivered, 6) if delivered else None,
        control_messages=len(controls),
        active_duration_ms=active_ms,
        delivered_by_domain=dict(sorted(Counter(e["domain"] for e in good).items())),
        control_by_iface=dict(sorted(Counter(e["iface"] for e in controls).items())),
        breakdown_ms=breakdown,
        instance_series=[
            {k: e[k] for k in ("t", "domain", "vnf_type", "count")}
            for e in events
            if e["kind"] == "instances"
        ],
        migrations=[
            {k: e[k] for k in ("t", "instance_id", "domain", "cache", "delay_ms")}
            for e in events
            if e["kind"] == "migration"
        ],
    )
