"""
Type definitions for the NFV gateway emulator.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, Literal, Mapping, Optional, Tuple

from .constants import MIN_PERIODIC_INTERVAL_MS

AnyObject = Dict[str, Any]


class DomainId(str, Enum):
    GATEWAY_PROVIDER = "gateway-provider"
    VWSN1 = "vwsn1"
    VWSN2 = "vwsn2"
    APPLICATION = "application"

    @property
    def is_vwsn(self) -> bool:
        return self in (DomainId.VWSN1, DomainId.VWSN2)

    @property
    def hosts_vnfs(self) -> bool:
        return self is not DomainId.APPLICATION


class SensorBrand(str, Enum):
    """BRAND_A sends text lines, BRAND_B sends binary frames."""

    BRAND_A = "brand-a"
    BRAND_B = "brand-b"

    @property
    def domain(self) -> DomainId:
        return DomainId.VWSN1 if self is SensorBrand.BRAND_A else DomainId.VWSN2


class Quantity(str, Enum):
    TEMPERATURE = "temperature"
    HUMIDITY = "humidity"
    WIND_SPEED = "windspeed"
    CO2 = "co2"
    RAINFALL = "rainfall"


# SenML unit per quantity
UNITS: Mapping[Quantity, str] = {
    Quantity.TEMPERATURE: "Cel",
    Quantity.HUMIDITY: "%RH",
    Quantity.WIND_SPEED: "m/s",
    Quantity.CO2: "ppm",
    Quantity.RAINFALL: "mm",
}


class VNFType(str, Enum):
    PROTOCOL_CONVERTER_1 = "PC1"
    INFO_MODEL_PROCESSOR_1 = "IMP1"
    PROTOCOL_CONVERTER_2 = "PC2"
    INFO_MODEL_PROCESSOR_2 = "IMP2"

    @property
    def suffix(self) -> int:
        return int(self.value[-1])

    @property
    def domain(self) -> DomainId:
        return DomainId.VWSN1 if self.suffix == 1 else DomainId.VWSN2

    @property
    def is_info_model_processor(self) -> bool:
        return self.value.startswith("IMP")

    @property
    def is_protocol_converter(self) -> bool:
        return self.value.startswith("PC")

    @classmethod
    def chain_for(cls, domain: DomainId) -> Tuple["VNFType", "VNFType"]:
        """Stage order of the static chain serving ``domain``."""
        if domain is DomainId.VWSN1:
            return (cls.INFO_MODEL_PROCESSOR_1, cls.PROTOCOL_CONVERTER_1)
        if domain is DomainId.VWSN2:
            return (cls.INFO_MODEL_PROCESSOR_2, cls.PROTOCOL_CONVERTER_2)
        raise ValueError(f"No chain serves domain {domain.value}")


class LifecycleState(str, Enum):
    REQUESTED = "requested"
    INSTANTIATED = "instantiated"
    MIGRATING = "migrating"
    RUNNING = "running"
    TERMINATED = "terminated"
    FAILED = "failed"

    @property
    def is_absorbing(self) -> bool:
        return self in (LifecycleState.TERMINATED, LifecycleState.FAILED)


class LifecycleEvent(str, Enum):
    INSTANTIATE_DONE = "instantiate_done"
    MIGRATE_CMD = "migrate_cmd"
    MIGRATE_DONE = "migrate_done"
    UPDATE_CMD = "update_cmd"
    TERMINATE_CMD = "terminate_cmd"
    FAULT = "fault"


@dataclass(frozen=True)
class SensorReading:
    sensor_id: str
    brand: SensorBrand
    quantity: Quantity
    value: float
    timestamp: int  # ms since the Unix epoch

    def __post_init__(self):
        if not self.sensor_id:
            raise ValueError("sensor_id must not be empty")
        if not math.isfinite(self.value):
            raise ValueError("value must be finite")
        if self.timestamp <= 0:
            raise ValueError("timestamp must be positive")


@dataclass(frozen=True)
class VNFDescriptor:
    vnf_type: VNFType
    image_id: str
    version: int
    cpu_units: int
    mem_units: int
    image_size_bytes: int
    per_instance_capacity: float  # messages/second

    def __post_init__(self):
        if self.cpu_units < 1 or self.mem_units < 1:
            raise ValueError("cpu_units and mem_units must be >= 1")
        if self.image_size_bytes <= 0:
            raise ValueError("image_size_bytes must be positive")
        if self.per_instance_capacity <= 0:
            raise ValueError("per_instance_capacity must be positive")

    @property
    def service_time_ms(self) -> int:
        """Time one instance spends on one message."""
        return max(1, math.ceil(1000 / self.per_instance_capacity))

    def to_dict(self) -> AnyObject:
        return {
            "vnf_type": self.vnf_type.value,
            "image_id": self.image_id,
            "version": self.version,
            "cpu_units": self.cpu_units,
            "mem_units": self.mem_units,
            "image_size_bytes": self.image_size_bytes,
            "per_instance_capacity": self.per_instance_capacity,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VNFDescriptor":
        return cls(
            vnf_type=VNFType(data["vnf_type"]),
            image_id=data["image_id"],
            version=int(data["version"]),
            cpu_units=int(data["cpu_units"]),
            mem_units=int(data["mem_units"]),
            image_size_bytes=int(data["image_size_bytes"]),
            per_instance_capacity=float(data["per_instance_capacity"]),
        )


@dataclass(frozen=True)
class Location:
    domain: DomainId
    node_id: str

    def to_dict(self) -> AnyObject:
        return {"domain": self.domain.value, "node_id": self.node_id}


@dataclass(frozen=True)
class VNFInstance:
    instance_id: str
    descriptor: VNFDescriptor
    state: LifecycleState = LifecycleState.REQUESTED
    location: Optional[Location] = None
    chain_id: Optional[str] = None
    observed_load: float = 0.0

    @property
    def vnf_type(self) -> VNFType:
        return self.descriptor.vnf_type

    def evolve(self, **changes: Any) -> "VNFInstance":
        updated = replace(self, **changes)
        if updated.state is not LifecycleState.RUNNING and updated.observed_load:
            updated = replace(updated, observed_load=0.0)
        return updated

    def to_dict(self) -> AnyObject:
        return {
            "instance_id": self.instance_id,
            "descriptor": self.descriptor.to_dict(),
            "state": self.state.value,
            "location": self.location.to_dict() if self.location else None,
            "chain_id": self.chain_id,
            "observed_load": self.observed_load,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VNFInstance":
        location = data.get("location")
        return cls(
            instance_id=data["instance_id"],
            descriptor=VNFDescriptor.from_dict(data["descriptor"]),
            state=LifecycleState(data["state"]),
            location=(
                Location(DomainId(location["domain"]), location["node_id"]) if location else None
            ),
            chain_id=data.get("chain_id"),
            observed_load=float(data.get("observed_load", 0.0)),
        )


@dataclass(frozen=True)
class ServiceChain:
    chain_id: str
    domain: DomainId
    stages: Tuple[VNFInstance, ...]


@dataclass(frozen=True)
class CollectionPattern:
    kind: Literal["once", "periodic"]
    interval_ms: Optional[int] = None

    def __post_init__(self):
        if self.kind == "periodic":
            if self.interval_ms is None or self.interval_ms < MIN_PERIODIC_INTERVAL_MS:
                raise ValueError(f"periodic interval must be >= {MIN_PERIODIC_INTERVAL_MS} ms")
        elif self.kind == "once":
            if self.interval_ms is not None:
                raise ValueError("a once pattern takes no interval")
        else:
            raise ValueError(f"Unknown collection pattern: {self.kind}")

    @classmethod
    def once(cls) -> "CollectionPattern":
        return cls("once")

    @classmethod
    def periodic(cls, interval_ms: int) -> "CollectionPattern":
        return cls("periodic", interval_ms)

    def to_dict(self) -> AnyObject:
        if self.kind == "once":
            return {"kind": "once"}
        return {"kind": "periodic", "interval_ms": self.interval_ms}


@dataclass(frozen=True)
class ServiceRequest:
    request_id: str
    app_callback_url: str
    quantities: FrozenSet[Quantity]
    pattern: CollectionPattern

    def __post_init__(self):
        if not self.request_id:
            raise ValueError("request_id must not be empty")
        if not self.quantities:
            raise ValueError("quantities must not be empty")

    def to_dict(self) -> AnyObject:
        return {
            "request_id": self.request_id,
            "app_callback_url": self.app_callback_url,
            "quantities": sorted(q.value for q in self.quantities),
            "pattern": self.pattern.to_dict(),
        }


@dataclass(frozen=True)
class VnfConfig:
    """Handler configuration for one running VNF instance (its EMS-managed settings)."""

    target_url: Optional[str] = None
    labels: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> AnyObject:
        return {"target_url": self.target_url, "labels": dict(self.labels)}
