"""
Scenario configuration: pydantic models for the JSON scenario file plus the built-in
prototype and elasticity scenarios.
"""

from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import orjson
from pydantic import BaseModel, Field, ValidationError, model_validator

from .constants import (
    DEFAULT_CONTROL_LATENCY_MS,
    DEFAULT_DRAIN_S,
    DEFAULT_DURATION_S,
    DEFAULT_LEG_TIMEOUT_MS,
    DEFAULT_LINK_LATENCY_MS,
    DEFAULT_SEED,
    DEFAULT_SPLIT_BASE_PORT,
)
from .errors import ConfigError
from .mano import MigrationCostModel, ScalingPolicy
from .nfvi import NodeDescriptor
from .sensors import LoadPhase, SensorSpec
from .types import CollectionPattern, DomainId, Quantity, SensorBrand, VNFDescriptor, VNFType

FaultKind = Literal["transfer_fault", "kill_instance", "service_down", "service_up"]


class PatternConfig(BaseModel):
    kind: Literal["once", "periodic"] = "periodic"
    interval_ms: Optional[int] = 1000

    @model_validator(mode="after")
    def drop_interval_for_once(self) -> "PatternConfig":
        if self.kind == "once":
            self.interval_ms = None
        return self

    def to_pattern(self) -> CollectionPattern:
        return CollectionPattern(self.kind, self.interval_ms)


class SensorConfig(BaseModel):
    brand: SensorBrand
    sensor_id: str = Field(pattern=r"^[A-Za-z0-9._~-]+$")
    quantities: List[Quantity] = Field(default_factory=lambda: [Quantity.TEMPERATURE], min_length=1)
    pattern: PatternConfig = Field(default_factory=PatternConfig)

    def to_spec(self) -> SensorSpec:
        pattern = self.pattern.to_pattern()
        return SensorSpec(self.brand, self.sensor_id, tuple(self.quantities), pattern)


class NodeConfig(BaseModel):
    node_id: str
    cpu_capacity: int = Field(gt=0)
    mem_capacity: int = Field(gt=0)


class CostModelConfig(BaseModel):
    bandwidth_bytes_per_s: int = Field(default=100_000_000, gt=0)
    boot_time_ms: int = Field(default=2000, ge=0)
    state_transfer_ms: int = Field(default=0, ge=0)

    def to_model(self) -> MigrationCostModel:
        return MigrationCostModel(**self.model_dump())


class PolicyConfig(BaseModel):
    util_target: float = 0.8
    scale_down_threshold: float = 0.3
    up_window_s: int = 10
    down_window_s: int = 30
    min_instances: int = 1
    max_instances: int = 10
    reconcile_period_ms: int = 1000

    def to_policy(self) -> ScalingPolicy:
        return ScalingPolicy(**self.model_dump())


class DescriptorConfig(BaseModel):
    vnf_type: VNFType
    version: int = 1
    cpu_units: int = Field(default=1, ge=1)
    mem_units: int = Field(default=1, ge=1)
    image_size_bytes: int = Field(default=100_000_000, gt=0)
    per_instance_capacity: float = Field(default=50.0, gt=0)

    def to_descriptor(self, image_id: str) -> VNFDescriptor:
        return VNFDescriptor(image_id=image_id, **self.model_dump())


class FaultConfig(BaseModel):
    at_ms: int = Field(ge=0)
    kind: FaultKind
    # a domain for transfer_fault and service_down/up; "<domain>:<VNF type>" or an
    # instance id for kill_instance
    target: str


class LoadConfig(BaseModel):
    """Offered load into the VWSN1 service, spread over a pool of BrandA sensor ids."""

    sensor_ids: List[str] = Field(default_factory=lambda: [f"L{i:02d}" for i in range(1, 21)])
    phases: List[LoadPhase] = Field(min_length=1)


def default_nodes() -> Dict[DomainId, List[NodeConfig]]:
    return {
        DomainId.GATEWAY_PROVIDER: [NodeConfig(node_id="core-1", cpu_capacity=16, mem_capacity=16)],
        DomainId.VWSN1: [
            NodeConfig(node_id="vwsn1-node-1", cpu_capacity=8, mem_capacity=8),
            NodeConfig(node_id="vwsn1-node-2", cpu_capacity=8, mem_capacity=8),
        ],
        DomainId.VWSN2: [
            NodeConfig(node_id="vwsn2-node-1", cpu_capacity=8, mem_capacity=8),
            NodeConfig(node_id="vwsn2-node-2", cpu_capacity=8, mem_capacity=8),
        ],
    }


def default_descriptors() -> List[DescriptorConfig]:
    return [DescriptorConfig(vnf_type=vnf_type) for vnf_type in VNFType]


class ScenarioConfig(BaseModel):
    name: str = "scenario"
    seed: int = DEFAULT_SEED
    clock: Literal["virtual", "real"] = "virtual"
    processes: Literal["single", "split"] = "single"
    duration_s: int = Field(default=DEFAULT_DURATION_S, ge=0)
    drain_s: int = Field(default=DEFAULT_DRAIN_S, ge=0)
    control_latency_ms: int = Field(default=DEFAULT_CONTROL_LATENCY_MS, ge=1)
    link_latency_ms: int = Field(default=DEFAULT_LINK_LATENCY_MS, ge=0)
    leg_timeout_ms: int = Field(default=DEFAULT_LEG_TIMEOUT_MS, gt=0)
    split_base_port: int = DEFAULT_SPLIT_BASE_PORT
    providers: List[DomainId] = Field(default_factory=lambda: [DomainId.VWSN1, DomainId.VWSN2])
    sensors: List[SensorConfig] = Field(default_factory=list)
    nodes: Dict[DomainId, List[NodeConfig]] = Field(default_factory=default_nodes)
    cost_model: CostModelConfig = Field(default_factory=CostModelConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    descriptors: List[DescriptorConfig] = Field(default_factory=default_descriptors)
    faults: List[FaultConfig] = Field(default_factory=list)
    load: Optional[LoadConfig] = None

    @model_validator(mode="after")
    def check_consistency(self) -> "ScenarioConfig":
        problems: List[str] = []
        for provider in self.providers:
            if not provider.is_vwsn:
                problems.append(f"provider {provider.value} is not a VWSN domain")

        seen = set()
        for sensor in self.sensors:
            if sensor.sensor_id in seen:
                problems.append(f"sensor id {sensor.sensor_id} is used twice")
            seen.add(sensor.sensor_id)
            try:
                sensor.to_spec()
            except ValueError as exc:
                problems.append(str(exc))
            if sensor.brand.domain not in self.providers:
                problems.append(
                    f"sensor {sensor.sensor_id} is {sensor.brand.value} but "
                    f"{sensor.brand.domain.value} is not requested"
                )
            interval = sensor.pattern.interval_ms
            if sensor.brand is SensorBrand.BRAND_B and interval is not None and interval % 1000:
                problems.append(
                    f"BrandB sensor {sensor.sensor_id} stamps whole seconds; "
                    "its interval must be a multiple of 1000 ms"
                )

        if self.load is not None and DomainId.VWSN1 not in self.providers:
            problems.append("offered load needs the vwsn1 provider")

        types = [d.vnf_type for d in self.descriptors]
        missing = [t.value for t in VNFType if t not in types]
        if missing:
            problems.append(f"no descriptor for {missing}")
        if len(set(types)) != len(types):
            problems.append("each VNF type takes exactly one descriptor")

        for domain in (DomainId.GATEWAY_PROVIDER, *self.providers):
            if not self.nodes.get(domain):
                problems.append(f"no nodes for {domain.value}")
        if DomainId.APPLICATION in self.nodes:
            problems.append("the application domain hosts no nodes")

        if problems:
            raise ValueError("; ".join(problems))
        return self

    def sensor_specs(self) -> List[SensorSpec]:
        return [sensor.to_spec() for sensor in self.sensors]

    def node_descriptors(self, domain: DomainId) -> List[NodeDescriptor]:
        return [
            NodeDescriptor(node.node_id, domain, node.cpu_capacity, node.mem_capacity)
            for node in self.nodes.get(domain, [])
        ]

    def cost(self) -> MigrationCostModel:
        model = self.cost_model.to_model()
        model.check_images([d.image_size_bytes for d in self.descriptors])
        return model


def parse_config(data: Union[bytes, str, dict]) -> ScenarioConfig:
    try:
        if isinstance(data, dict):
            config = ScenarioConfig.model_validate(data)
        else:
            config = ScenarioConfig.model_validate(orjson.loads(data))
    except (ValidationError, orjson.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario config: {exc}") from exc
    config.cost()
    return config


def load(path: Union[str, Path]) -> ScenarioConfig:
    return parse_config(Path(path).read_bytes())


def prototype(seed: int = DEFAULT_SEED, duration_s: int = DEFAULT_DURATION_S) -> ScenarioConfig:
    """Six BrandA and two BrandB sensors at one message per second."""
    sensors = [
        SensorConfig(
            brand=SensorBrand.BRAND_A, sensor_id=f"A{i}", quantities=[Quantity.TEMPERATURE]
        )
        for i in range(1, 7)
    ]
    sensors += [
        SensorConfig(
            brand=SensorBrand.BRAND_B,
            sensor_id=str(i),
            quantities=[Quantity.TEMPERATURE, Quantity.HUMIDITY],
        )
        for i in (1, 2)
    ]
    return ScenarioConfig(name="prototype", seed=seed, duration_s=duration_s, sensors=sensors)


def elasticity(seed: int = DEFAULT_SEED) -> ScenarioConfig:
    """Offered load stepping 10, 200, 10 msg/s into VWSN1."""
    return ScenarioConfig(
        name="elasticity",
        seed=seed,
        duration_s=0,
        drain_s=180,
        providers=[DomainId.VWSN1],
        load=LoadConfig(
            phases=[
                LoadPhase(duration_s=30, rate=10),
                LoadPhase(duration_s=60, rate=200),
                LoadPhase(duration_s=60, rate=10),
            ]
        ),
    )
