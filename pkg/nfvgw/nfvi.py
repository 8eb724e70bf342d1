"""
Simulated NFVI compute nodes: resource accounting (Nf-Vi) and the execution environment
hosting running VNF instances (Vn-Nf).
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import structlog

from .constants import LOAD_BUCKET_MS, LOAD_WINDOW_S
from .errors import (
    ChainUnavailable,
    DropWithError,
    ImageNotCached,
    InsufficientCapacity,
    NoAllocation,
    UnknownAllocation,
)
from .image_store import CacheResult, ImageCaches
from .metrics import TraceRecorder
from .types import AnyObject, DomainId, VnfConfig, VNFType
from .vnf import VNF_FUNCTIONS, VNFFunction, VNFMessage

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    domain: DomainId
    cpu_capacity: int
    mem_capacity: int

    def __post_init__(self):
        if self.cpu_capacity <= 0 or self.mem_capacity <= 0:
            raise ValueError("node capacities must be positive")
        if not self.domain.hosts_vnfs:
            raise ValueError(f"{self.domain.value} does not host NFVI nodes")


@dataclass(frozen=True)
class Allocation:
    allocation_id: str
    node_id: str
    instance_id: str
    cpu_units: int
    mem_units: int


class LoadMeter:
    """Arrival counter with one-second buckets, averaged over the most recent complete ones."""

    def __init__(self, window_s: int = LOAD_WINDOW_S, bucket_ms: int = LOAD_BUCKET_MS):
        self.window_s = window_s
        self.bucket_ms = bucket_ms
        self._buckets: Dict[int, int] = defaultdict(int)

    def record(self, now_ms: int) -> None:
        self._buckets[now_ms // self.bucket_ms] += 1
        oldest = now_ms // self.bucket_ms - self.window_s
        for stale in [b for b in self._buckets if b < oldest]:
            del self._buckets[stale]

    def rate(self, now_ms: int) -> float:
        """Messages per second over the last ``window_s`` complete buckets."""
        current = now_ms // self.bucket_ms
        total = sum(self._buckets.get(b, 0) for b in range(current - self.window_s, current))
        return total * 1000 / (self.window_s * self.bucket_ms)

    def last_second_rate(self, now_ms: int) -> float:
        previous = now_ms // self.bucket_ms - 1
        return self._buckets.get(previous, 0) * 1000 / self.bucket_ms


class RunningHandle:
    """A live VNF instance on a node. Messages are handled one at a time."""

    def __init__(
        self,
        instance_id: str,
        image_id: str,
        function: VNFFunction,
        config: VnfConfig,
        service_time_ms: int,
    ):
        self.instance_id = instance_id
        self.image_id = image_id
        self.function = function
        self.alive = True
        self.busy_until_ms = 0
        self.processed = 0
        self.dropped = 0
        self.meter = LoadMeter()
        self._config = config
        self._service_time_ms = service_time_ms

    @property
    def vnf_type(self) -> VNFType:
        return self.function.vnf_type

    @property
    def service_time_ms(self) -> int:
        return self._service_time_ms

    @property
    def config(self) -> VnfConfig:
        return self._config

    def update(self, config: VnfConfig) -> None:
        self._config = config

    def stop(self) -> None:
        self.alive = False

    def record_arrival(self, now_ms: int) -> None:
        self.meter.record(now_ms)

    def process(self, msg: VNFMessage) -> VNFMessage:
        if not self.alive:
            raise ChainUnavailable(f"instance {self.instance_id} is stopped")
        config = self._config
        try:
            outputs = self.function.handler(msg, config)
        except DropWithError:
            self.dropped += 1
            raise
        if len(outputs) != 1:
            self.dropped += 1
            raise DropWithError(self.vnf_type.value, f"stage emitted {len(outputs)} messages")
        self.processed += 1
        return outputs[0]


@dataclass(frozen=True)
class InstanceLoad:
    instance_id: str
    vnf_type: VNFType
    observed_load: float
    last_second_rate: float


@dataclass(frozen=True)
class NodeState:
    node_id: str
    free_cpu: int
    free_mem: int
    instances: Tuple[InstanceLoad, ...] = field(default_factory=tuple)

    def to_dict(self) -> AnyObject:
        return {
            "node_id": self.node_id,
            "free_cpu": self.free_cpu,
            "free_mem": self.free_mem,
            "instances": [
                {
                    "instance_id": load.instance_id,
                    "vnf_type": load.vnf_type.value,
                    "observed_load": load.observed_load,
                    "last_second_rate": load.last_second_rate,
                }
                for load in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, data: AnyObject) -> "NodeState":
        return cls(
            node_id=data["node_id"],
            free_cpu=int(data["free_cpu"]),
            free_mem=int(data["free_mem"]),
            instances=tuple(
                InstanceLoad(
                    instance_id=item["instance_id"],
                    vnf_type=VNFType(item["vnf_type"]),
                    observed_load=float(item["observed_load"]),
                    last_second_rate=float(item["last_second_rate"]),
                )
                for item in data["instances"]
            ),
        )


class NfviNode:
    """One compute node, owned by the event loop of the process hosting its domain."""

    def __init__(
        self,
        descriptor: NodeDescriptor,
        caches: Optional[ImageCaches] = None,
        recorder: Optional[TraceRecorder] = None,
    ):
        self.descriptor = descriptor
        self.caches = caches
        self.recorder = recorder or TraceRecorder()
        self._allocations: Dict[str, Allocation] = {}
        self._handles: Dict[str, RunningHandle] = {}
        self._next_allocation = 1
        self._free_cpu = descriptor.cpu_capacity
        self._free_mem = descriptor.mem_capacity

    @property
    def node_id(self) -> str:
        return self.descriptor.node_id

    @property
    def domain(self) -> DomainId:
        return self.descriptor.domain

    def free_capacity(self) -> Tuple[int, int]:
        return self._free_cpu, self._free_mem

    def fits(self, cpu_units: int, mem_units: int) -> bool:
        free_cpu, free_mem = self.free_capacity()
        return cpu_units <= free_cpu and mem_units <= free_mem

    def allocate(self, instance_id: str, cpu_units: int, mem_units: int) -> Allocation:
        if cpu_units <= 0 or mem_units <= 0:
            raise ValueError("resource requirements must be positive")
        if cpu_units > self._free_cpu or mem_units > self._free_mem:
            raise InsufficientCapacity(
                f"{self.node_id} has ({self._free_cpu}, {self._free_mem}) free, "
                f"requested ({cpu_units}, {mem_units})"
            )
        allocation = Allocation(
            allocation_id=f"{self.node_id}-alloc-{self._next_allocation}",
            node_id=self.node_id,
            instance_id=instance_id,
            cpu_units=cpu_units,
            mem_units=mem_units,
        )
        self._next_allocation += 1
        self._allocations[allocation.allocation_id] = allocation
        self._free_cpu -= cpu_units
        self._free_mem -= mem_units
        self._record_allocation("allocate", allocation)
        return allocation

    def release(self, allocation_id: str) -> None:
        allocation = self._allocations.pop(allocation_id, None)
        if allocation is None:
            raise UnknownAllocation(f"{allocation_id} is not allocated on {self.node_id}")
        self._free_cpu += allocation.cpu_units
        self._free_mem += allocation.mem_units
        self._record_allocation("release", allocation)

    def _record_allocation(self, op: str, allocation: Allocation) -> None:
        self.recorder.record(
            "allocation",
            op=op,
            node_id=self.node_id,
            instance_id=allocation.instance_id,
            cpu=allocation.cpu_units,
            mem=allocation.mem_units,
            free_cpu=self._free_cpu,
            free_mem=self._free_mem,
            cpu_capacity=self.descriptor.cpu_capacity,
            mem_capacity=self.descriptor.mem_capacity,
        )

    def allocation_for(self, instance_id: str) -> Optional[Allocation]:
        for allocation in self._allocations.values():
            if allocation.instance_id == instance_id:
                return allocation
        return None

    def allocations(self) -> List[Allocation]:
        return list(self._allocations.values())

    def image_available(self, image_id: str) -> bool:
        if self.caches is None:
            return False
        if self.domain.is_vwsn:
            return self.caches.cache_check(self.domain, image_id) is CacheResult.HIT
        return self.caches.store.has_image(image_id)

    def run_instance(
        self,
        image_id: str,
        vnf_type: VNFType,
        config: VnfConfig,
        instance_id: str,
        service_time_ms: int = 1,
    ) -> RunningHandle:
        if self.allocation_for(instance_id) is None:
            raise NoAllocation(f"{instance_id} has no allocation on {self.node_id}")
        if not self.image_available(image_id):
            raise ImageNotCached(f"Image {image_id[:12]} is not cached in {self.domain.value}")

        handle = RunningHandle(
            instance_id, image_id, VNF_FUNCTIONS[vnf_type], config, service_time_ms
        )
        self._handles[instance_id] = handle
        logger.debug("Instance running", node_id=self.node_id, instance_id=instance_id)
        return handle

    def stop_instance(self, instance_id: str) -> None:
        handle = self._handles.pop(instance_id, None)
        if handle is not None:
            handle.stop()

    def handle(self, instance_id: str) -> Optional[RunningHandle]:
        return self._handles.get(instance_id)

    def handles(self) -> Dict[str, RunningHandle]:
        return dict(self._handles)

    def report_state(self, now_ms: int) -> NodeState:
        free_cpu, free_mem = self._free_cpu, self._free_mem
        handles = sorted(self._handles.values(), key=lambda h: h.instance_id)
        return NodeState(
            node_id=self.node_id,
            free_cpu=free_cpu,
            free_mem=free_mem,
            instances=tuple(
                InstanceLoad(
                    instance_id=h.instance_id,
                    vnf_type=h.vnf_type,
                    observed_load=h.meter.rate(now_ms),
                    last_second_rate=h.meter.last_second_rate(now_ms),
                )
                for h in handles
                if h.alive
            ),
        )


def audit_nodes(nodes: Iterable[NfviNode]) -> List[str]:
    """Every running instance must hold an allocation and a cached image on its node."""
    violations: List[str] = []
    for node in nodes:
        free_cpu, free_mem = node.free_capacity()
        if not (0 <= free_cpu <= node.descriptor.cpu_capacity):
            violations.append(f"capacity conservation: {node.node_id} cpu free {free_cpu}")
        if not (0 <= free_mem <= node.descriptor.mem_capacity):
            violations.append(f"capacity conservation: {node.node_id} mem free {free_mem}")
        for instance_id, handle in node.handles().items():
            if not handle.alive:
                continue
            if node.allocation_for(instance_id) is None:
                violations.append(f"unallocated instance: {instance_id} on {node.node_id}")
            if not node.image_available(handle.image_id):
                violations.append(f"uncached image: {instance_id} on {node.node_id}")
    return violations
