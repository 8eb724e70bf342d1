"""
Sensor emulators for both brands and the offered-load generator.

Frame streams are pure functions of (spec, seed): the same inputs always produce the same
bytes. ``SensorDriver`` puts a stream on the wire through the scenario clock.
"""

import math
import random
import zlib
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import structlog

from .clock import Scheduler
from .codecs import (
    BrandBCode,
    convert_brand_b,
    encode_brand_a,
    encode_brand_b,
    raw_adc_for,
)
from .constants import DEFAULT_EPOCH_MS, DEFAULT_LINK_LATENCY_MS, EMIT_TIME_HEADER, RAW_CONTENT_TYPE
from .errors import TransportError
from .metrics import TraceRecorder
from .transport import Transport
from .types import CollectionPattern, Quantity, SensorBrand, SensorReading

logger = structlog.get_logger(__name__)

# (low, high) physical range per quantity
PHYSICAL_RANGES: Mapping[Quantity, Tuple[float, float]] = {
    Quantity.TEMPERATURE: (15.0, 45.0),
    Quantity.HUMIDITY: (30.0, 95.0),
    Quantity.WIND_SPEED: (0.0, 25.0),
    Quantity.CO2: (350.0, 2000.0),
    Quantity.RAINFALL: (0.0, 50.0),
}
WALK_STEP = 0.02  # max step as a fraction of the range

_BRAND_B_CODES: Mapping[Quantity, BrandBCode] = {
    Quantity.TEMPERATURE: BrandBCode.TEMPERATURE,
    Quantity.HUMIDITY: BrandBCode.HUMIDITY,
}


@dataclass(frozen=True)
class SensorSpec:
    brand: SensorBrand
    sensor_id: str
    quantities: Tuple[Quantity, ...]
    pattern: CollectionPattern

    def __post_init__(self):
        if not self.quantities:
            raise ValueError(f"sensor {self.sensor_id} measures nothing")
        if self.brand is SensorBrand.BRAND_B:
            if not self.sensor_id.isdigit() or int(self.sensor_id) > 0xFFFF:
                raise ValueError(f"BrandB sensor id {self.sensor_id!r} must be a 16-bit number")
            unsupported = [q.value for q in self.quantities if q not in _BRAND_B_CODES]
            if unsupported:
                raise ValueError(f"BrandB sensors cannot measure {unsupported}")


class EmittedFrame(NamedTuple):
    at_ms: int  # scenario time of emission
    sensor_id: str
    seq: int
    quantity: Quantity
    value: float  # the value the frame decodes to
    frame: bytes


class ValueWalk:
    """Bounded random walk of one quantity."""

    def __init__(self, rng: random.Random, quantity: Quantity):
        self.rng = rng
        self.low, self.high = PHYSICAL_RANGES[quantity]
        span = self.high - self.low
        self.step = span * WALK_STEP
        self.value = self.low + span * (0.25 + 0.5 * rng.random())

    def next(self) -> float:
        self.value += self.rng.uniform(-self.step, self.step)
        self.value = min(max(self.value, self.low), self.high)
        return self.value


def sensor_rng(seed: int, sensor_id: str) -> random.Random:
    return random.Random(seed ^ zlib.crc32(sensor_id.encode("utf-8")))


def encode_frame(
    brand: SensorBrand, sensor_id: str, quantity: Quantity, value: float, timestamp_ms: int
) -> Tuple[bytes, float]:
    """Frame one measurement; returns the frame and the value it decodes to."""
    if brand is SensorBrand.BRAND_A:
        value = round(value, 2)
        reading = SensorReading(sensor_id, brand, quantity, value, timestamp_ms)
        return encode_brand_a(reading), value
    code = _BRAND_B_CODES[quantity]
    raw = raw_adc_for(value, code)
    frame = encode_brand_b(int(sensor_id), code, raw, timestamp_ms // 1000)
    return frame, convert_brand_b(raw, code)


def emulate_sensor(
    spec: SensorSpec,
    seed: int,
    duration_ms: int,
    start_ms: int = 0,
    epoch_ms: int = DEFAULT_EPOCH_MS,
) -> Iterator[EmittedFrame]:
    """
    Frames of one sensor: a single frame for a once pattern, otherwise one frame per
    interval at offsets 0, interval, ... below ``duration_ms``. Quantities take turns.
    """
    rng = sensor_rng(seed, spec.sensor_id)
    walks = {quantity: ValueWalk(rng, quantity) for quantity in spec.quantities}
    if spec.pattern.kind == "once":
        count = 1
    else:
        assert spec.pattern.interval_ms is not None
        count = max(0, math.ceil(duration_ms / spec.pattern.interval_ms))
    interval = spec.pattern.interval_ms or 0

    for seq in range(count):
        at_ms = start_ms + seq * interval
        quantity = spec.quantities[seq % len(spec.quantities)]
        frame, value = encode_frame(
            spec.brand, spec.sensor_id, quantity, walks[quantity].next(), epoch_ms + at_ms
        )
        yield EmittedFrame(at_ms, spec.sensor_id, seq, quantity, value, frame)


@dataclass(frozen=True)
class LoadPhase:
    duration_s: int
    rate: int  # messages per second over the whole sensor pool

    def __post_init__(self):
        if self.duration_s <= 0 or self.rate < 0:
            raise ValueError("load phases need a positive duration and a non-negative rate")


def load_schedule(
    phases: Sequence[LoadPhase],
    sensor_ids: Sequence[str],
    seed: int,
    start_ms: int = 0,
    epoch_ms: int = DEFAULT_EPOCH_MS,
    quantity: Quantity = Quantity.TEMPERATURE,
) -> Iterator[EmittedFrame]:
    """BrandA temperature frames at the phase rates, assigned round-robin over ``sensor_ids``."""
    if not sensor_ids:
        raise ValueError("load_schedule needs at least one sensor id")
    walks = {sid: ValueWalk(sensor_rng(seed, sid), quantity) for sid in sensor_ids}
    seqs: Dict[str, int] = {sid: 0 for sid in sensor_ids}
    phase_start = start_ms
    turn = 0
    for phase in phases:
        total = phase.duration_s * phase.rate
        for k in range(total):
            at_ms = phase_start + (k * 1000) // phase.rate
            sid = sensor_ids[turn % len(sensor_ids)]
            turn += 1
            frame, value = encode_frame(
                SensorBrand.BRAND_A, sid, quantity, walks[sid].next(), epoch_ms + at_ms
            )
            yield EmittedFrame(at_ms, sid, seqs[sid], quantity, value, frame)
            seqs[sid] += 1
        phase_start += phase.duration_s * 1000


class SensorDriver:
    """Emits frames at their scheduled times and posts them to a provider endpoint."""

    def __init__(
        self,
        transport: Transport,
        clock: Scheduler,
        recorder: TraceRecorder,
        link_latency_ms: int = DEFAULT_LINK_LATENCY_MS,
    ):
        self.transport = transport
        self.clock = clock
        self.recorder = recorder
        self.link_latency_ms = link_latency_ms
        self.scheduled = 0

    def start(self, brand: SensorBrand, endpoint: str, frames: Iterator[EmittedFrame]) -> int:
        count = 0
        for frame in frames:
            self.clock.call_at(frame.at_ms, self._emit, brand, endpoint, frame)
            count += 1
        self.scheduled += count
        logger.debug("Sensor stream scheduled", endpoint=endpoint, frames=count)
        return count

    def _emit(self, brand: SensorBrand, endpoint: str, frame: EmittedFrame) -> None:
        self.recorder.record(
            "emit",
            sensor_id=frame.sensor_id,
            domain=brand.domain.value,
            seq=frame.seq,
            quantity=frame.quantity.value,
            value=frame.value,
        )
        self.clock.call_later(self.link_latency_ms, self._post, brand, endpoint, frame)

    async def _post(self, brand: SensorBrand, endpoint: str, frame: EmittedFrame) -> None:
        reason: Optional[str] = None
        try:
            response = await self.transport.request(
                "POST",
                endpoint,
                frame.frame,
                {"Content-Type": RAW_CONTENT_TYPE, EMIT_TIME_HEADER: str(frame.at_ms)},
            )
            if not response.ok:
                reason = f"ingestion answered {response.status}"
        except TransportError as exc:
            reason = str(exc)
        if reason is not None:
            self.recorder.record(
                "loss",
                trace_id=None,
                sensor_id=frame.sensor_id,
                domain=brand.domain.value,
                reason=reason,
            )


def specs_by_brand(specs: Sequence[SensorSpec]) -> Dict[SensorBrand, List[SensorSpec]]:
    grouped: Dict[SensorBrand, List[SensorSpec]] = {brand: [] for brand in SensorBrand}
    for spec in specs:
        grouped[spec.brand].append(spec)
    return grouped
