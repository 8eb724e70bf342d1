import dataclasses

import hypothesis.strategies as st
import orjson
import pytest
from hypothesis import assume, given

from nfvgw.errors import (
    ConfigError,
    CoreCapacityExhausted,
    IllegalTransition,
    ImageNotFound,
    NoFeasibleNode,
    TransferFault,
)
from nfvgw.image_store import CacheResult, build_manifest
from nfvgw.mano import DomainLink, Mano, MigrationCostModel, ScalingPolicy, desired_instances, place
from nfvgw.metrics import verify_trace
from nfvgw.rpc import RpcClient
from nfvgw.nfvi import NfviNode, NodeDescriptor, NodeState
from nfvgw.types import DomainId, LifecycleState, VnfConfig, VNFType

from .conftest import make_descriptor

COST = MigrationCostModel(bandwidth_bytes_per_s=100_000_000, boot_time_ms=2000)


def _publish(store, vnf_type, **overrides):
    provisional = make_descriptor(vnf_type, **overrides)
    image_id = store.publish_image(vnf_type, provisional.version, build_manifest(provisional))
    return dataclasses.replace(provisional, image_id=image_id)


@pytest.fixture
def core(store, caches, clock, recorder):
    nodes = [NfviNode(NodeDescriptor("core-1", DomainId.GATEWAY_PROVIDER, 4, 4), caches, recorder)]
    return Mano(DomainId.GATEWAY_PROVIDER, nodes, store, caches, clock, recorder, COST)


@pytest.fixture
def vwsn1(store, caches, clock, recorder):
    nodes = [
        NfviNode(NodeDescriptor(f"vwsn1-node-{i}", DomainId.VWSN1, 2, 2), caches, recorder)
        for i in (1, 2)
    ]
    return Mano(DomainId.VWSN1, nodes, store, caches, clock, recorder, COST)


@pytest.fixture
def imp1(store):
    return _publish(store, VNFType.INFO_MODEL_PROCESSOR_1)


async def _deploy(core, target, descriptor, clock):
    """Instantiate on the core and migrate into ``target``; returns the running instance."""
    instance = core.instantiate(descriptor)
    delay = await core.migrate(instance.instance_id, target.link())
    await clock.run_until(clock.now_ms + delay)
    return target.get(instance.instance_id)


# --- cost model ---


def test_cold_and_warm_costs():
    assert COST.transfer_ms(100_000_000) == 1000
    assert COST.cold_cost_ms(100_000_000) == 3000
    assert COST.warm_cost_ms() == 2000
    assert COST.transfer_ms(1) == 1


@given(
    size=st.integers(min_value=1, max_value=10**10),
    bandwidth=st.integers(min_value=1, max_value=10**9),
    boot=st.integers(min_value=0, max_value=10**5),
    state=st.integers(min_value=0, max_value=10**5),
)
def test_warm_is_cheaper_whenever_the_images_check_out(size, bandwidth, boot, state):
    model = MigrationCostModel(bandwidth, boot, state)
    assume(size * 1000 > bandwidth * state)
    model.check_images([size])
    assert model.warm_cost_ms() < model.cold_cost_ms(size)


def test_check_images_rejects_images_smaller_than_state():
    model = MigrationCostModel(1_000_000, 100, state_transfer_ms=500)
    with pytest.raises(ConfigError):
        model.check_images([500_000])
    model.check_images([500_001])


def test_cost_model_validation():
    with pytest.raises(ValueError):
        MigrationCostModel(0, 100)
    with pytest.raises(ValueError):
        MigrationCostModel(1, -1)


# --- policy and placement ---


@pytest.mark.parametrize(
    "rate,expected", [(0, 1), (10, 1), (40, 1), (41, 2), (200, 5), (201, 6), (10_000, 10)]
)
def test_desired_instances(rate, expected):
    descriptor = make_descriptor(VNFType.PROTOCOL_CONVERTER_1)
    assert desired_instances(rate, ScalingPolicy(), descriptor) == expected


def test_desired_instances_rejects_negative_rates():
    with pytest.raises(ValueError):
        desired_instances(-1, ScalingPolicy(), make_descriptor(VNFType.PROTOCOL_CONVERTER_1))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"util_target": 0},
        {"util_target": 1.5},
        {"scale_down_threshold": 0.9},
        {"min_instances": 0},
        {"min_instances": 5, "max_instances": 4},
        {"reconcile_period_ms": 0},
    ],
)
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        ScalingPolicy(**kwargs)


def test_place_is_first_fit_by_node_id():
    descriptor = make_descriptor(VNFType.PROTOCOL_CONVERTER_1, cpu_units=2, mem_units=1)
    nodes = [NodeState("n-2", 4, 4), NodeState("n-1", 1, 4), NodeState("n-0", 2, 1)]
    assert place(descriptor, nodes) == "n-0"
    assert place(descriptor, nodes[:2]) == "n-2"
    with pytest.raises(NoFeasibleNode):
        place(descriptor, [NodeState("n-1", 1, 4)])


# --- lifecycle operations ---


def test_instantiate_on_core(core, imp1, recorder):
    instance = core.instantiate(imp1)
    assert instance.state is LifecycleState.INSTANTIATED
    assert instance.location.node_id == "core-1"
    assert core.node("core-1").free_capacity() == (3, 3)
    assert recorder.of_kind("lifecycle")[0]["to"] == "instantiated"


def test_instantiate_unknown_image(core):
    with pytest.raises(ImageNotFound):
        core.instantiate(make_descriptor(VNFType.PROTOCOL_CONVERTER_1, image_id="missing"))


def test_core_capacity_exhaustion(core, store):
    big = _publish(store, VNFType.PROTOCOL_CONVERTER_1, cpu_units=3, mem_units=3)
    core.instantiate(big)
    with pytest.raises(CoreCapacityExhausted):
        core.instantiate(big)


async def test_cold_then_warm_migration(core, vwsn1, imp1, clock, caches, recorder):
    first = await _deploy(core, vwsn1, imp1, clock)
    assert clock.now_ms == 3000
    assert first.state is LifecycleState.RUNNING
    assert first.location.domain is DomainId.VWSN1
    assert first.instance_id not in core.instances
    assert core.node("core-1").free_capacity() == (4, 4)
    assert caches.cache_check(DomainId.VWSN1, imp1.image_id) is CacheResult.HIT
    assert vwsn1.handle(first.instance_id).alive

    second = core.instantiate(imp1)
    assert await core.migrate(second.instance_id, vwsn1.link()) == 2000

    migrations = recorder.of_kind("migration")
    assert [(m["cache"], m["delay_ms"]) for m in migrations] == [("miss", 3000), ("hit", 2000)]
    await clock.run_until(clock.now_ms + 2000)
    assert len(vwsn1.running(VNFType.INFO_MODEL_PROCESSOR_1)) == 2
    assert verify_trace(recorder.events) == []


async def test_completion_callback_reports_the_running_instance(core, vwsn1, imp1, clock):
    seen = []

    async def on_done(instance, error):
        seen.append((instance.state, error))

    instance = core.instantiate(imp1)
    await core.migrate(instance.instance_id, vwsn1.link(), on_done)
    await clock.run_until(3000)
    assert seen == [(LifecycleState.RUNNING, None)]


async def test_running_instance_cannot_migrate_again(core, vwsn1, imp1, clock):
    running = await _deploy(core, vwsn1, imp1, clock)
    with pytest.raises(IllegalTransition):
        await vwsn1.migrate(running.instance_id, core.link())


async def test_transfer_fault_fails_the_instance(core, vwsn1, imp1, clock, recorder):
    seen = []

    async def on_done(instance, error):
        seen.append((instance.state, error))

    core.arm_transfer_fault(DomainId.VWSN1)
    instance = core.instantiate(imp1)
    await core.migrate(instance.instance_id, vwsn1.link(), on_done)
    await clock.run_until(3000)

    state, error = seen[0]
    assert state is LifecycleState.FAILED
    assert isinstance(error, TransferFault)
    assert core.get(instance.instance_id).state is LifecycleState.FAILED
    assert core.node("core-1").free_capacity() == (4, 4)
    assert all(node.free_capacity() == (2, 2) for node in vwsn1.nodes.values())
    assert vwsn1.running() == []
    assert verify_trace(recorder.events) == []

    # the fault is spent
    assert (await _deploy(core, vwsn1, imp1, clock)).state is LifecycleState.RUNNING


async def test_update_terminate_and_fail(core, vwsn1, imp1, clock, recorder):
    first = await _deploy(core, vwsn1, imp1, clock)
    second = await _deploy(core, vwsn1, imp1, clock)

    vwsn1.update(first.instance_id, VnfConfig(target_url="http://app/x"))
    assert vwsn1.handle(first.instance_id).config.target_url == "http://app/x"

    assert vwsn1.terminate(first.instance_id).state is LifecycleState.TERMINATED
    assert vwsn1.fail(second.instance_id).state is LifecycleState.FAILED
    with pytest.raises(IllegalTransition):
        vwsn1.terminate(first.instance_id)
    assert all(node.free_capacity() == (2, 2) for node in vwsn1.nodes.values())
    assert verify_trace(recorder.events) == []


async def test_target_without_room(core, vwsn1, store, clock):
    wide = _publish(store, VNFType.PROTOCOL_CONVERTER_1, cpu_units=3, mem_units=1)
    instance = core.instantiate(wide)
    with pytest.raises(NoFeasibleNode):
        await core.migrate(instance.instance_id, vwsn1.link())
    assert core.get(instance.instance_id).state is LifecycleState.INSTANTIATED
    assert all(node.allocations() == [] for node in vwsn1.nodes.values())


async def test_migration_reaches_the_target_only_through_rpc_frames(core, vwsn1, imp1, clock):
    frames = []

    async def send(frame):
        frames.append(frame)
        return vwsn1.endpoint.dispatch(frame)

    link = DomainLink(DomainId.VWSN1, RpcClient("vwsn1-mano", send))
    instance = core.instantiate(imp1)
    delay = await core.migrate(instance.instance_id, link)
    await clock.run_until(clock.now_ms + delay)

    methods = [orjson.loads(frame)["method"] for frame in frames]
    assert methods == [
        "nfvi.report_state",
        "nfvi.allocate",
        "cache.check",
        "cache.insert",
        "nfvi.run_instance",
        "vnfm.adopt",
    ]
    assert vwsn1.get(instance.instance_id).state is LifecycleState.RUNNING


async def test_failed_run_gives_the_target_allocation_back(core, vwsn1, imp1, clock, recorder):
    async def send(frame):
        if orjson.loads(frame)["method"] == "nfvi.run_instance":
            request_id = orjson.loads(frame)["id"]
            error = {"code": "image_not_cached", "message": "cache was flushed"}
            return orjson.dumps({"id": request_id, "error": error})
        return vwsn1.endpoint.dispatch(frame)

    link = DomainLink(DomainId.VWSN1, RpcClient("vwsn1-mano", send))
    instance = core.instantiate(imp1)
    delay = await core.migrate(instance.instance_id, link)
    await clock.run_until(clock.now_ms + delay)

    assert core.get(instance.instance_id).state is LifecycleState.FAILED
    assert all(node.free_capacity() == (2, 2) for node in vwsn1.nodes.values())
    assert verify_trace(recorder.events) == []


# --- elasticity ---


async def _offer(mano, service_id, vnf_type, clock, rate, seconds):
    """Offer ``rate`` arrivals per second to the pool, reconciling after every second."""
    actions = []
    for _ in range(seconds):
        members = mano.pool_members(service_id, vnf_type)
        start = clock.now_ms
        for k in range(rate):
            handle = mano.handle(members[k % len(members)].instance_id)
            handle.record_arrival(start + (k * 1000) // rate)
        await clock.run_until(start + 1000)
        actions.extend(await mano.reconcile())
    return actions


async def test_scale_up_after_the_up_window(core, vwsn1, imp1, clock, recorder):
    requests = []

    async def requester(service_id, descriptor, count):
        requests.append((service_id, descriptor.vnf_type, count))

    vwsn1.scale_requester = requester
    vwsn1.add_to_pool("svc", await _deploy(core, vwsn1, imp1, clock))

    actions = await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 9)
    assert actions == []
    actions = await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 1)
    assert [(a.kind, a.count) for a in actions] == [("scale-up", 4)]
    assert requests == [("svc", VNFType.INFO_MODEL_PROCESSOR_1, 4)]

    # outstanding instances are not requested twice
    assert await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 12) == []
    assert recorder.of_kind("scale")[0]["action"] == "scale-up"

    vwsn1.scale_settled("svc", VNFType.INFO_MODEL_PROCESSOR_1, 4)
    actions = await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 10)
    assert [(a.kind, a.count) for a in actions] == [("scale-up", 4)]


async def test_short_burst_does_not_scale(core, vwsn1, imp1, clock):
    requests = []

    async def requester(service_id, descriptor, count):
        requests.append(count)

    vwsn1.scale_requester = requester
    vwsn1.add_to_pool("svc", await _deploy(core, vwsn1, imp1, clock))
    await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 5)
    await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 10, 1)
    await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 200, 5)
    assert requests == []


async def test_scale_down_keeps_the_oldest(core, vwsn1, imp1, clock, recorder):
    deployed = [await _deploy(core, vwsn1, imp1, clock) for _ in range(3)]
    for instance in deployed:
        vwsn1.add_to_pool("svc", instance)

    assert await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 10, 29) == []
    actions = await _offer(vwsn1, "svc", VNFType.INFO_MODEL_PROCESSOR_1, clock, 10, 1)
    assert actions[0].kind == "scale-down"
    assert actions[0].instance_ids == (deployed[2].instance_id, deployed[1].instance_id)
    members = vwsn1.pool_members("svc", VNFType.INFO_MODEL_PROCESSOR_1)
    assert [m.instance_id for m in members] == [deployed[0].instance_id]

    counts = [e["count"] for e in recorder.of_kind("instances")]
    assert counts[-1] == 1
    assert verify_trace(recorder.events) == []
