import orjson
import pytest

from nfvgw.config import elasticity, load, parse_config, prototype
from nfvgw.errors import ConfigError
from nfvgw.types import DomainId, Quantity, SensorBrand, VNFType


def brand_a(sensor_id="A1", **extra):
    return {"brand": "brand-a", "sensor_id": sensor_id, **extra}


def brand_b(sensor_id="1", **extra):
    return {"brand": "brand-b", "sensor_id": sensor_id, **extra}


def test_defaults():
    config = parse_config({})
    assert config.providers == [DomainId.VWSN1, DomainId.VWSN2]
    assert config.clock == "virtual"
    assert [d.vnf_type for d in config.descriptors] == list(VNFType)
    assert [n.node_id for n in config.node_descriptors(DomainId.VWSN2)] == [
        "vwsn2-node-1",
        "vwsn2-node-2",
    ]
    assert config.node_descriptors(DomainId.APPLICATION) == []


def test_sensor_patterns():
    config = parse_config(
        {
            "sensors": [
                brand_a("A1", pattern={"kind": "once", "interval_ms": 500}),
                brand_a("A2", quantities=["co2", "rainfall"], pattern={"interval_ms": 250}),
            ]
        }
    )
    once, periodic = config.sensor_specs()
    assert once.pattern.interval_ms is None
    assert periodic.pattern.interval_ms == 250
    assert periodic.quantities == (Quantity.CO2, Quantity.RAINFALL)


@pytest.mark.parametrize(
    "data,problem",
    [
        ({"sensors": [brand_b(pattern={"interval_ms": 1500})]}, "multiple of 1000"),
        ({"sensors": [brand_a("A1"), brand_a("A1")]}, "used twice"),
        ({"providers": ["vwsn1"], "sensors": [brand_b()]}, "vwsn2 is not requested"),
        ({"sensors": [brand_b("X1")]}, "16-bit number"),
        ({"sensors": [brand_b(quantities=["windspeed"])]}, "cannot measure"),
        ({"sensors": [brand_a(pattern={"interval_ms": 50})]}, "periodic interval"),
        ({"sensors": [brand_a("A 1")]}, "sensor_id"),
        ({"providers": ["gateway-provider"]}, "not a VWSN domain"),
        (
            {"providers": ["vwsn2"], "load": {"phases": [{"duration_s": 1, "rate": 1}]}},
            "offered load needs the vwsn1 provider",
        ),
        ({"descriptors": [{"vnf_type": "IMP1"}]}, "no descriptor for"),
        (
            {"descriptors": [{"vnf_type": t.value} for t in VNFType] + [{"vnf_type": "PC1"}]},
            "exactly one descriptor",
        ),
        ({"nodes": {"gateway-provider": [], "vwsn1": [], "vwsn2": []}}, "no nodes for"),
        (
            {"nodes": {"application": [{"node_id": "a", "cpu_capacity": 1, "mem_capacity": 1}]}},
            "hosts no nodes",
        ),
        ({"cost_model": {"state_transfer_ms": 1000}}, "not larger than bandwidth"),
        ({"duration_s": -1}, "duration_s"),
    ],
)
def test_invalid_configs(data, problem):
    with pytest.raises(ConfigError, match=problem):
        parse_config(data)


def test_unparseable_config():
    with pytest.raises(ConfigError):
        parse_config(b"{not json")


def test_load_reads_a_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_bytes(orjson.dumps({"name": "file", "seed": 3, "sensors": [brand_a()]}))
    config = load(path)
    assert (config.name, config.seed) == ("file", 3)
    assert config.sensors[0].brand is SensorBrand.BRAND_A


def test_prototype_shape():
    config = prototype(seed=11, duration_s=60)
    brands = [sensor.brand for sensor in config.sensors]
    assert brands.count(SensorBrand.BRAND_A) == 6
    assert brands.count(SensorBrand.BRAND_B) == 2
    assert all(sensor.pattern.interval_ms == 1000 for sensor in config.sensors)
    assert config.seed == 11
    assert parse_config(config.model_dump(mode="json")) == config


def test_elasticity_shape():
    config = elasticity()
    assert config.providers == [DomainId.VWSN1]
    assert config.load is not None
    assert [(p.duration_s, p.rate) for p in config.load.phases] == [(30, 10), (60, 200), (60, 10)]
    assert config.load.sensor_ids[0] == "L01"
    assert len(config.load.sensor_ids) == 20
    assert config.drain_s == 180
