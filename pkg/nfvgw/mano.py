"""
Management and orchestration: VNF lifecycle (Ve-Vnfm), placement (VIM role), cache-aware
migration and the elastic scaling policy.

One ``Mano`` runs per domain. The gateway-provider MANO instantiates every VNF on its core
nodes and migrates it into a VWSN domain; once the instance runs there, the VWSN domain's
MANO adopts it and manages it from then on.
"""

import math
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Dict, List, Optional, Sequence, Tuple

import structlog

from .clock import Scheduler
from .errors import (
    ConfigError,
    CoreCapacityExhausted,
    GatewayError,
    ImageNotFound,
    NoFeasibleNode,
    NotFound,
    TransferFault,
)
from .image_store import CacheResult, ImageCaches, ImageStore
from .lifecycle import lifecycle_next
from .metrics import TraceRecorder
from .nfvi import Allocation, NfviNode, NodeState
from .rpc import RpcClient, RpcEndpoint
from .types import (
    AnyObject,
    DomainId,
    LifecycleEvent,
    LifecycleState,
    Location,
    VnfConfig,
    VNFDescriptor,
    VNFInstance,
    VNFType,
)

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class MigrationCostModel:
    bandwidth_bytes_per_s: int
    boot_time_ms: int
    state_transfer_ms: int = 0

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth_bytes_per_s must be positive")
        if self.boot_time_ms < 0 or self.state_transfer_ms < 0:
            raise ValueError("boot_time_ms and state_transfer_ms must be non-negative")

    def transfer_ms(self, image_size_bytes: int) -> int:
        return -(-image_size_bytes * 1000 // self.bandwidth_bytes_per_s)

    def cold_cost_ms(self, image_size_bytes: int) -> int:
        return self.transfer_ms(image_size_bytes) + self.boot_time_ms

    def warm_cost_ms(self) -> int:
        return self.state_transfer_ms + self.boot_time_ms

    def check_images(self, image_sizes: Sequence[int]) -> None:
        """Every image must transfer slower than the state it would skip."""
        for size in image_sizes:
            if size * 1000 <= self.bandwidth_bytes_per_s * self.state_transfer_ms:
                raise ConfigError(
                    f"image of {size} bytes is not larger than bandwidth x state_transfer; "
                    "a warm migration would not be cheaper than a cold one"
                )


@dataclass(frozen=True)
class ScalingPolicy:
    util_target: float = 0.8
    scale_down_threshold: float = 0.3
    up_window_s: int = 10
    down_window_s: int = 30
    min_instances: int = 1
    max_instances: int = 10
    reconcile_period_ms: int = 1000

    def __post_init__(self):
        if not 0 < self.util_target <= 1:
            raise ValueError("util_target must be in (0, 1]")
        if not 0 <= self.scale_down_threshold < self.util_target:
            raise ValueError("scale_down_threshold must be below util_target")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if self.reconcile_period_ms <= 0 or self.up_window_s < 0 or self.down_window_s < 0:
            raise ValueError("windows and reconcile period must be positive")


def desired_instances(arrival_rate: float, policy: ScalingPolicy, descriptor: VNFDescriptor) -> int:
    if arrival_rate < 0:
        raise ValueError("arrival_rate must be non-negative")
    per_instance = policy.util_target * descriptor.per_instance_capacity
    needed = math.ceil(round(arrival_rate / per_instance, 9))
    return min(max(needed, policy.min_instances), policy.max_instances)


def place(descriptor: VNFDescriptor, nodes: Sequence[NodeState]) -> str:
    """First fit over nodes in ascending node_id order."""
    for state in sorted(nodes, key=lambda s: s.node_id):
        if state.free_cpu >= descriptor.cpu_units and state.free_mem >= descriptor.mem_units:
            return state.node_id
    raise NoFeasibleNode(
        f"no node fits {descriptor.vnf_type.value} ({descriptor.cpu_units}, {descriptor.mem_units})"
    )


@dataclass(frozen=True)
class ScalingAction:
    kind: str  # "scale-up" or "scale-down"
    vnf_type: VNFType
    count: int
    instance_ids: Tuple[str, ...] = ()


@dataclass
class _PoolScaler:
    descriptor: VNFDescriptor
    members: List[str] = field(default_factory=list)  # oldest first
    pending: int = 0
    up_ticks: int = 0
    up_min_desired: int = 0
    down_ticks: int = 0
    down_max_desired: int = 0

    def reset(self) -> None:
        self.up_ticks = self.down_ticks = 0


MigrationDone = Callable[[VNFInstance, Optional[GatewayError]], Awaitable[None]]
ScaleRequester = Callable[[str, VNFDescriptor, int], Awaitable[None]]


class DomainLink:
    """
    Typed calls into another domain's MANO over its Nf-Vi and Ve-Vnfm JSON-RPC endpoint.
    The client decides whether the frames stay in the process or cross loopback HTTP.
    """

    def __init__(self, domain: DomainId, client: RpcClient):
        self.domain = domain
        self.client = client

    async def node_states(self) -> List[NodeState]:
        return [NodeState.from_dict(item) for item in await self.client.call("nfvi.report_state")]

    async def allocate(self, node_id: str, instance_id: str, descriptor: VNFDescriptor) -> None:
        await self.client.call(
            "nfvi.allocate",
            {
                "node_id": node_id,
                "instance_id": instance_id,
                "cpu_units": descriptor.cpu_units,
                "mem_units": descriptor.mem_units,
            },
        )

    async def run_instance(self, node_id: str, instance_id: str, descriptor: VNFDescriptor) -> None:
        await self.client.call(
            "nfvi.run_instance",
            {
                "node_id": node_id,
                "instance_id": instance_id,
                "image_id": descriptor.image_id,
                "vnf_type": descriptor.vnf_type.value,
                "service_time_ms": descriptor.service_time_ms,
            },
        )

    async def discard(self, node_id: str, instance_id: str) -> None:
        """Stop ``instance_id`` on the node and give its allocation back."""
        await self.client.call("nfvi.discard", {"node_id": node_id, "instance_id": instance_id})

    async def cache_check(self, image_id: str) -> CacheResult:
        return CacheResult(await self.client.call("cache.check", {"image_id": image_id}))

    async def cache_insert(self, image_id: str) -> None:
        await self.client.call("cache.insert", {"image_id": image_id})

    async def adopt(self, instance: VNFInstance) -> None:
        await self.client.call("vnfm.adopt", {"instance": instance.to_dict()})


class Mano:
    def __init__(
        self,
        domain: DomainId,
        nodes: Sequence[NfviNode],
        store: ImageStore,
        caches: ImageCaches,
        clock: Scheduler,
        recorder: Optional[TraceRecorder] = None,
        cost_model: Optional[MigrationCostModel] = None,
        policy: Optional[ScalingPolicy] = None,
    ):
        if not domain.hosts_vnfs:
            raise ValueError(f"{domain.value} has no MANO")
        self.domain = domain
        self.nodes: Dict[str, NfviNode] = {node.node_id: node for node in nodes}
        self.store = store
        self.caches = caches
        self.clock = clock
        self.recorder = recorder or TraceRecorder(clock)
        self.cost_model = cost_model or MigrationCostModel(100_000_000, 2000, 0)
        self.policy = policy or ScalingPolicy()
        self.instances: Dict[str, VNFInstance] = {}
        self.scale_requester: Optional[ScaleRequester] = None

        self._next_instance = 1
        self._transfer_faults: Dict[DomainId, int] = {}
        self._pools: Dict[Tuple[str, VNFType], _PoolScaler] = {}
        self._last_counts: Dict[VNFType, int] = {}
        self._reconcile_handle = None

        self.endpoint = RpcEndpoint(f"{domain.value}-mano")
        self.endpoint.register("nfvi.report_state", self._rpc_report_state)
        self.endpoint.register("nfvi.allocate", self._rpc_allocate)
        self.endpoint.register("nfvi.run_instance", self._rpc_run_instance)
        self.endpoint.register("nfvi.discard", self._rpc_discard)
        self.endpoint.register("cache.check", self._rpc_cache_check)
        self.endpoint.register("cache.insert", self._rpc_cache_insert)
        self.endpoint.register("vnfm.adopt", self._rpc_adopt)

    # --- Nf-Vi ---

    def _rpc_report_state(self, params: AnyObject) -> List[AnyObject]:
        return [
            self.nodes[node_id].report_state(self.clock.now_ms).to_dict()
            for node_id in sorted(self.nodes)
        ]

    def node_states(self) -> List[NodeState]:
        return [NodeState.from_dict(item) for item in self.endpoint.call("nfvi.report_state")]

    def node(self, node_id: str) -> NfviNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFound(f"{node_id} is not a node of {self.domain.value}") from None

    def link(self) -> DomainLink:
        """Link to this MANO for a caller in the same process."""
        return DomainLink(self.domain, self.endpoint.client())

    def _rpc_allocate(self, params: AnyObject) -> AnyObject:
        node = self.node(params["node_id"])
        allocation = node.allocate(params["instance_id"], params["cpu_units"], params["mem_units"])
        return {"allocation_id": allocation.allocation_id}

    def _rpc_run_instance(self, params: AnyObject) -> AnyObject:
        self.node(params["node_id"]).run_instance(
            params["image_id"],
            VNFType(params["vnf_type"]),
            VnfConfig(),
            instance_id=params["instance_id"],
            service_time_ms=params["service_time_ms"],
        )
        return {"running": params["instance_id"]}

    def _rpc_discard(self, params: AnyObject) -> AnyObject:
        node = self.node(params["node_id"])
        node.stop_instance(params["instance_id"])
        self._release(params["instance_id"], [node])
        return {"discarded": params["instance_id"]}

    def _rpc_cache_check(self, params: AnyObject) -> str:
        return self.caches.cache_check(self.domain, params["image_id"]).value

    def _rpc_cache_insert(self, params: AnyObject) -> AnyObject:
        self.caches.cache_insert(self.domain, params["image_id"])
        return {"cached": params["image_id"]}

    def _allocation_of(self, instance_id: str) -> Optional[Tuple[NfviNode, Allocation]]:
        for node in self.nodes.values():
            allocation = node.allocation_for(instance_id)
            if allocation is not None:
                return node, allocation
        return None

    # --- lifecycle ---

    def get(self, instance_id: str) -> VNFInstance:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise NotFound(f"{instance_id} is not managed by {self.domain.value}") from None

    def _transition(self, instance: VNFInstance, event: LifecycleEvent, **changes) -> VNFInstance:
        new_state = lifecycle_next(instance.state, event)
        updated = instance.evolve(state=new_state, **changes)
        self.instances[instance.instance_id] = updated
        self.recorder.record(
            "lifecycle",
            instance_id=instance.instance_id,
            vnf_type=instance.vnf_type.value,
            domain=self.domain.value,
            **{"from": instance.state.value, "event": event.value, "to": new_state.value},
        )
        return updated

    def instantiate(self, descriptor: VNFDescriptor) -> VNFInstance:
        """Create an instance on a core node of this (gateway-provider) domain."""
        if not self.store.has_image(descriptor.image_id):
            raise ImageNotFound(f"Image {descriptor.image_id} is not published")
        try:
            node_id = place(descriptor, self.node_states())
        except NoFeasibleNode as exc:
            raise CoreCapacityExhausted(str(exc)) from exc

        instance_id = f"vnf-{self._next_instance:04d}"
        self._next_instance += 1
        instance = VNFInstance(instance_id=instance_id, descriptor=descriptor)
        self.instances[instance_id] = instance
        self.nodes[node_id].allocate(instance_id, descriptor.cpu_units, descriptor.mem_units)
        instance = self._transition(
            instance, LifecycleEvent.INSTANTIATE_DONE, location=Location(self.domain, node_id)
        )
        logger.info("VNF instantiated", instance_id=instance_id, vnf_type=descriptor.vnf_type.value)
        return instance

    def arm_transfer_fault(self, domain: DomainId) -> None:
        """Make the next migration into ``domain`` fail."""
        self._transfer_faults[domain] = self._transfer_faults.get(domain, 0) + 1

    async def migrate(
        self,
        instance_id: str,
        target: DomainLink,
        on_done: Optional[MigrationDone] = None,
    ) -> int:
        """
        Start moving an Instantiated instance to ``target``'s domain; returns the simulated
        delay in ms. Completion runs ``on_done(instance, error)`` once the delay elapsed.
        """
        instance = self.get(instance_id)
        lifecycle_next(instance.state, LifecycleEvent.MIGRATE_CMD)
        descriptor = instance.descriptor

        node_id = place(descriptor, await target.node_states())
        await target.allocate(node_id, instance_id, descriptor)
        try:
            instance = self._transition(self.get(instance_id), LifecycleEvent.MIGRATE_CMD)
        except GatewayError:
            # the instance changed state while the target was allocating
            await target.discard(node_id, instance_id)
            raise

        cache = await target.cache_check(descriptor.image_id)
        if cache is CacheResult.HIT:
            delay_ms = self.cost_model.warm_cost_ms()
        else:
            delay_ms = self.cost_model.cold_cost_ms(descriptor.image_size_bytes)

        faulty = self._transfer_faults.get(target.domain, 0) > 0
        if faulty:
            self._transfer_faults[target.domain] -= 1

        self.recorder.record(
            "migration",
            instance_id=instance_id,
            domain=target.domain.value,
            node_id=node_id,
            cache=cache.value,
            delay_ms=delay_ms,
        )
        logger.info(
            "VNF migration started",
            instance_id=instance_id,
            target=target.domain.value,
            cache=cache.value,
            delay_ms=delay_ms,
        )
        self.clock.call_later(
            delay_ms, self._complete_migration, instance_id, target, node_id, cache, faulty, on_done
        )
        return delay_ms

    async def _complete_migration(
        self,
        instance_id: str,
        target: DomainLink,
        node_id: str,
        cache: CacheResult,
        faulty: bool,
        on_done: Optional[MigrationDone],
    ) -> None:
        instance = self.instances[instance_id]
        if instance.state is not LifecycleState.MIGRATING:
            return
        descriptor = instance.descriptor
        error: Optional[GatewayError] = None

        try:
            if faulty:
                raise TransferFault(f"transfer of {instance_id} to {target.domain.value} failed")
            if cache is CacheResult.MISS:
                self.store.fetch_image(descriptor.image_id)
                await target.cache_insert(descriptor.image_id)
            await target.run_instance(node_id, instance_id, descriptor)
        except GatewayError as exc:
            error = exc
            logger.warning("VNF migration failed", instance_id=instance_id, error=str(exc))
            try:
                await target.discard(node_id, instance_id)
            except GatewayError as cleanup:
                logger.warning("Target cleanup failed", instance_id=instance_id, error=str(cleanup))
            self._release(instance_id, self.nodes.values())
            instance = self._transition(instance, LifecycleEvent.FAULT)
        else:
            self._release(instance_id, self.nodes.values())
            instance = self._transition(
                instance, LifecycleEvent.MIGRATE_DONE, location=Location(target.domain, node_id)
            )
            await target.adopt(instance)
            del self.instances[instance_id]

        if on_done is not None:
            await on_done(instance, error)

    def _rpc_adopt(self, params: AnyObject) -> AnyObject:
        instance = VNFInstance.from_dict(params["instance"])
        if instance.location is None or instance.location.node_id not in self.nodes:
            raise NotFound(f"{instance.instance_id} is not located in {self.domain.value}")
        if self.nodes[instance.location.node_id].handle(instance.instance_id) is None:
            raise NotFound(f"{instance.instance_id} is not running in {self.domain.value}")
        self.instances[instance.instance_id] = instance
        logger.debug("VNF adopted", instance_id=instance.instance_id, domain=self.domain.value)
        return {"adopted": instance.instance_id}

    @staticmethod
    def _release(instance_id: str, nodes) -> None:
        for node in nodes:
            allocation = node.allocation_for(instance_id)
            if allocation is not None:
                node.release(allocation.allocation_id)

    def _stop(self, instance_id: str) -> None:
        for node in self.nodes.values():
            node.stop_instance(instance_id)
        self._release(instance_id, self.nodes.values())
        for pool in self._pools.values():
            if instance_id in pool.members:
                pool.members.remove(instance_id)

    def terminate(self, instance_id: str) -> VNFInstance:
        instance = self.get(instance_id)
        lifecycle_next(instance.state, LifecycleEvent.TERMINATE_CMD)
        self._stop(instance_id)
        instance = self._transition(instance, LifecycleEvent.TERMINATE_CMD)
        self._note_counts()
        logger.info("VNF terminated", instance_id=instance_id, domain=self.domain.value)
        return instance

    def fail(self, instance_id: str, reason: str = "fault") -> VNFInstance:
        instance = self.get(instance_id)
        lifecycle_next(instance.state, LifecycleEvent.FAULT)
        self._stop(instance_id)
        instance = self._transition(instance, LifecycleEvent.FAULT)
        self._note_counts()
        logger.warning("VNF failed", instance_id=instance_id, reason=reason)
        return instance

    def update(self, instance_id: str, config: VnfConfig) -> VNFInstance:
        """Swap the handler configuration of a Running instance between two messages."""
        instance = self.get(instance_id)
        lifecycle_next(instance.state, LifecycleEvent.UPDATE_CMD)
        handle = self.handle(instance_id)
        if handle is None:
            raise NotFound(f"{instance_id} has no running handle")
        handle.update(config)
        return self._transition(instance, LifecycleEvent.UPDATE_CMD)

    def terminate_all(self) -> None:
        for instance_id in sorted(self.instances):
            if not self.instances[instance_id].state.is_absorbing:
                self.terminate(instance_id)

    def handle(self, instance_id: str):
        for node in self.nodes.values():
            handle = node.handle(instance_id)
            if handle is not None:
                return handle
        return None

    def running(self, vnf_type: Optional[VNFType] = None) -> List[VNFInstance]:
        return [
            instance
            for _, instance in sorted(self.instances.items())
            if instance.state is LifecycleState.RUNNING
            and (vnf_type is None or instance.vnf_type is vnf_type)
        ]

    # --- pools and elasticity ---

    def add_to_pool(self, service_id: str, instance: VNFInstance) -> None:
        key = (service_id, instance.vnf_type)
        pool = self._pools.get(key)
        if pool is None:
            pool = self._pools[key] = _PoolScaler(descriptor=instance.descriptor)
        if instance.instance_id not in pool.members:
            pool.members.append(instance.instance_id)
        self._note_counts()

    def pool_members(self, service_id: str, vnf_type: VNFType) -> List[VNFInstance]:
        pool = self._pools.get((service_id, vnf_type))
        if pool is None:
            return []
        return [
            self.instances[instance_id]
            for instance_id in pool.members
            if self.instances[instance_id].state is LifecycleState.RUNNING
        ]

    def scale_settled(self, service_id: str, vnf_type: VNFType, requested: int) -> None:
        """A scale-up request finished, successfully or not."""
        pool = self._pools.get((service_id, vnf_type))
        if pool is not None:
            pool.pending = max(0, pool.pending - requested)

    def _note_counts(self) -> None:
        counts = {vnf_type: len(self.running(vnf_type)) for vnf_type in VNFType}
        for vnf_type in VNFType:
            if vnf_type.domain is not self.domain:
                continue
            if counts[vnf_type] != self._last_counts.get(vnf_type, 0):
                self.recorder.record(
                    "instances",
                    domain=self.domain.value,
                    vnf_type=vnf_type.value,
                    count=counts[vnf_type],
                )
        self._last_counts = counts

    def _refresh_loads(self) -> Dict[str, float]:
        """Per-instance arrival rate of the last complete second, via Nf-Vi."""
        last_second: Dict[str, float] = {}
        for state in self.node_states():
            for load in state.instances:
                last_second[load.instance_id] = load.last_second_rate
                instance = self.instances.get(load.instance_id)
                if instance is not None and instance.state is LifecycleState.RUNNING:
                    self.instances[load.instance_id] = instance.evolve(
                        observed_load=load.observed_load
                    )
        return last_second

    async def reconcile(self) -> List[ScalingAction]:
        """One scaling pass over every service pool of this domain."""
        policy = self.policy
        period_ms = policy.reconcile_period_ms
        loads = self._refresh_loads()
        actions: List[ScalingAction] = []

        for (service_id, vnf_type), pool in sorted(self._pools.items()):
            members = [m.instance_id for m in self.pool_members(service_id, vnf_type)]
            running = len(members)
            rate = sum(loads.get(member, 0.0) for member in members)
            desired = desired_instances(rate, policy, pool.descriptor)
            capacity = running * pool.descriptor.per_instance_capacity
            utilization = rate / capacity if capacity else math.inf

            if desired > running + pool.pending:
                pool.down_ticks = 0
                pool.up_min_desired = (
                    desired if pool.up_ticks == 0 else min(pool.up_min_desired, desired)
                )
                pool.up_ticks += 1
                if pool.up_ticks * period_ms >= policy.up_window_s * 1000:
                    count = pool.up_min_desired - running - pool.pending
                    pool.up_ticks = 0
                    if count > 0:
                        pool.pending += count
                        actions.append(ScalingAction("scale-up", vnf_type, count))
                        await self._request_scale_up(service_id, pool, count)
            elif utilization < policy.scale_down_threshold and desired < running:
                pool.up_ticks = 0
                pool.down_max_desired = (
                    desired if pool.down_ticks == 0 else max(pool.down_max_desired, desired)
                )
                pool.down_ticks += 1
                if pool.down_ticks * period_ms >= policy.down_window_s * 1000:
                    keep = max(pool.down_max_desired, policy.min_instances)
                    victims = list(reversed(members[keep:]))
                    pool.down_ticks = 0
                    for victim in victims:
                        self.terminate(victim)
                    if victims:
                        actions.append(
                            ScalingAction("scale-down", vnf_type, len(victims), tuple(victims))
                        )
            else:
                pool.reset()

        for action in actions:
            self.recorder.record(
                "scale",
                domain=self.domain.value,
                vnf_type=action.vnf_type.value,
                action=action.kind,
                count=action.count,
            )
        return actions

    async def _request_scale_up(self, service_id: str, pool: _PoolScaler, count: int) -> None:
        if self.scale_requester is None:
            pool.pending -= count
            return
        try:
            await self.scale_requester(service_id, pool.descriptor, count)
        except GatewayError as exc:
            # refused or unreachable core: retried after the next up window
            pool.pending = max(0, pool.pending - count)
            logger.warning("Scale-up request failed", service_id=service_id, error=str(exc))

    def start_reconcile(self) -> None:
        self._reconcile_handle = self.clock.call_later(
            self.policy.reconcile_period_ms, self._reconcile_tick
        )

    def stop_reconcile(self) -> None:
        if self._reconcile_handle is not None:
            self._reconcile_handle.cancel()
            self._reconcile_handle = None

    async def _reconcile_tick(self) -> None:
        self._reconcile_handle = self.clock.call_later(
            self.policy.reconcile_period_ms, self._reconcile_tick
        )
        await self.reconcile()
