import hypothesis.strategies as st
import pytest
from hypothesis import given

from nfvgw.clock import VirtualScheduler
from nfvgw.codecs import BrandBCode, convert_brand_b, decode_brand_a, decode_brand_b
from nfvgw.constants import DEFAULT_EPOCH_MS, EMIT_TIME_HEADER
from nfvgw.metrics import TraceRecorder
from nfvgw.sensors import (
    PHYSICAL_RANGES,
    LoadPhase,
    SensorDriver,
    SensorSpec,
    emulate_sensor,
    load_schedule,
)
from nfvgw.transport import InProcessTransport, Response, Service
from nfvgw.types import CollectionPattern, Quantity, SensorBrand

EVERY_SECOND = CollectionPattern.periodic(1000)


def brand_a(sensor_id="A1", quantities=(Quantity.TEMPERATURE,), pattern=EVERY_SECOND):
    return SensorSpec(SensorBrand.BRAND_A, sensor_id, tuple(quantities), pattern)


def brand_b(sensor_id="1", quantities=(Quantity.TEMPERATURE, Quantity.HUMIDITY)):
    return SensorSpec(SensorBrand.BRAND_B, sensor_id, tuple(quantities), EVERY_SECOND)


def test_streams_are_a_function_of_the_seed():
    spec = brand_a()
    assert list(emulate_sensor(spec, 7, 10_000)) == list(emulate_sensor(spec, 7, 10_000))
    assert [f.frame for f in emulate_sensor(spec, 7, 10_000)] != [
        f.frame for f in emulate_sensor(spec, 8, 10_000)
    ]


def test_sensors_with_the_same_seed_walk_independently():
    first = [f.value for f in emulate_sensor(brand_a("A1"), 7, 10_000)]
    second = [f.value for f in emulate_sensor(brand_a("A2"), 7, 10_000)]
    assert first != second


def test_once_pattern_emits_a_single_frame():
    frames = list(emulate_sensor(brand_a(pattern=CollectionPattern.once()), 7, 60_000, 250))
    assert len(frames) == 1
    assert frames[0].at_ms == 250


@pytest.mark.parametrize(
    "interval,duration,count", [(1000, 60_000, 60), (1500, 10_000, 7), (1000, 0, 0), (700, 100, 1)]
)
def test_periodic_frame_count(interval, duration, count):
    spec = brand_a(pattern=CollectionPattern.periodic(interval))
    frames = list(emulate_sensor(spec, 7, duration))
    assert len(frames) == count
    assert [f.at_ms for f in frames] == [k * interval for k in range(count)]
    assert [f.seq for f in frames] == list(range(count))


def test_quantities_take_turns():
    spec = brand_a(quantities=(Quantity.TEMPERATURE, Quantity.CO2, Quantity.RAINFALL))
    frames = list(emulate_sensor(spec, 7, 6000))
    assert [f.quantity for f in frames] == [
        Quantity.TEMPERATURE,
        Quantity.CO2,
        Quantity.RAINFALL,
    ] * 2


def test_brand_a_frames_decode_to_the_emitted_value():
    for frame in emulate_sensor(brand_a(quantities=tuple(Quantity)), 3, 5000):
        reading = decode_brand_a(frame.frame)
        assert reading.sensor_id == "A1"
        assert reading.quantity is frame.quantity
        assert reading.value == frame.value
        assert reading.timestamp == DEFAULT_EPOCH_MS + frame.at_ms


def test_brand_b_frames_decode_to_the_emitted_value():
    codes = {Quantity.TEMPERATURE: BrandBCode.TEMPERATURE, Quantity.HUMIDITY: BrandBCode.HUMIDITY}
    for frame in emulate_sensor(brand_b("513"), 3, 4000):
        fields = decode_brand_b(frame.frame)
        assert fields.sensor_id == 513
        assert fields.sensor_code == codes[frame.quantity]
        assert fields.epoch_s == (DEFAULT_EPOCH_MS + frame.at_ms) // 1000
        assert convert_brand_b(fields.raw_adc, fields.sensor_code) == frame.value


@given(st.integers(min_value=0, max_value=2**32), st.sampled_from(list(Quantity)))
def test_brand_a_values_stay_in_physical_range(seed, quantity):
    low, high = PHYSICAL_RANGES[quantity]
    for frame in emulate_sensor(brand_a(quantities=(quantity,)), seed, 30_000):
        assert low <= frame.value <= high


@pytest.mark.parametrize(
    "sensor_id,quantities",
    [
        ("B1", (Quantity.TEMPERATURE,)),
        ("70000", (Quantity.TEMPERATURE,)),
        ("1", (Quantity.WIND_SPEED,)),
        ("1", ()),
    ],
)
def test_brand_b_spec_validation(sensor_id, quantities):
    with pytest.raises(ValueError):
        SensorSpec(SensorBrand.BRAND_B, sensor_id, quantities, EVERY_SECOND)


def test_load_schedule_follows_phase_rates():
    phases = [LoadPhase(duration_s=2, rate=10), LoadPhase(duration_s=1, rate=4)]
    frames = list(load_schedule(phases, ["L01", "L02", "L03"], seed=7))
    assert len(frames) == 24
    assert [f.at_ms for f in frames[:3]] == [0, 100, 200]
    assert [f.at_ms for f in frames[20:]] == [2000, 2250, 2500, 2750]
    assert [f.sensor_id for f in frames[:4]] == ["L01", "L02", "L03", "L01"]
    assert [f.seq for f in frames if f.sensor_id == "L02"] == list(range(8))


def test_load_schedule_with_a_quiet_phase():
    phases = [LoadPhase(duration_s=1, rate=0), LoadPhase(duration_s=1, rate=2)]
    frames = list(load_schedule(phases, ["L01"], seed=1))
    assert [f.at_ms for f in frames] == [1000, 1500]


def test_load_validation():
    with pytest.raises(ValueError):
        LoadPhase(duration_s=0, rate=10)
    with pytest.raises(ValueError):
        LoadPhase(duration_s=1, rate=-1)
    with pytest.raises(ValueError):
        list(load_schedule([LoadPhase(duration_s=1, rate=1)], [], seed=1))


class IngestService(Service):
    name = "ingest"

    def __init__(self, host, status=202):
        super().__init__(host)
        self.status = status
        self.received = []
        self.add_route("POST", "/ingest", self.ingest)

    async def ingest(self, body, headers):
        self.received.append((body, headers))
        return Response.empty(self.status)


def _driver(status=202):
    clock = VirtualScheduler()
    recorder = TraceRecorder(clock)
    transport = InProcessTransport()
    service = IngestService("vwsn1-provider", status)
    transport.register(service)
    return clock, recorder, transport, service, SensorDriver(transport, clock, recorder, 2)


async def test_driver_emits_then_posts_after_link_latency():
    clock, recorder, _, service, driver = _driver()
    frames = list(emulate_sensor(brand_a(), 7, 3000))
    assert driver.start(SensorBrand.BRAND_A, "http://vwsn1-provider/ingest", iter(frames)) == 3

    await clock.run_until(1001)
    assert [e["t"] for e in recorder.of_kind("emit")] == [0, 1000]
    assert len(service.received) == 1

    await clock.run_until(5000)
    assert [body for body, _ in service.received] == [f.frame for f in frames]
    assert service.received[2][1][EMIT_TIME_HEADER.lower()] == "2000"
    assert recorder.of_kind("emit")[0]["domain"] == "vwsn1"
    assert recorder.of_kind("loss") == []


async def test_refused_or_unreachable_frames_are_lost():
    clock, recorder, transport, _, driver = _driver(status=503)
    frames = list(emulate_sensor(brand_a(), 7, 2000))
    driver.start(SensorBrand.BRAND_A, "http://vwsn1-provider/ingest", iter(frames))
    await clock.run_until(500)
    transport.mark_down("vwsn1-provider")
    await clock.run_until(5000)

    reasons = [e["reason"] for e in recorder.of_kind("loss")]
    assert reasons == ["ingestion answered 503", "vwsn1-provider is unreachable"]
