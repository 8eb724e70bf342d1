import pytest

from nfvgw.errors import ImageNotCached, InsufficientCapacity, NoAllocation, UnknownAllocation
from nfvgw.metrics import verify_trace
from nfvgw.nfvi import LoadMeter, NfviNode, NodeDescriptor, NodeState, audit_nodes
from nfvgw.types import DomainId, VnfConfig, VNFType


@pytest.fixture
def image_id(store):
    return store.publish_image(VNFType.INFO_MODEL_PROCESSOR_1, 1, b"imp1")


@pytest.fixture
def node(caches, recorder):
    return NfviNode(NodeDescriptor("vwsn1-node-1", DomainId.VWSN1, 4, 4), caches, recorder)


def test_descriptor_validation():
    with pytest.raises(ValueError):
        NodeDescriptor("n", DomainId.VWSN1, 0, 4)
    with pytest.raises(ValueError):
        NodeDescriptor("n", DomainId.APPLICATION, 4, 4)


def test_allocate_and_release_conserve_capacity(node):
    first = node.allocate("vnf-1", 3, 1)
    assert node.free_capacity() == (1, 3)
    assert not node.fits(2, 1)
    with pytest.raises(InsufficientCapacity):
        node.allocate("vnf-2", 2, 1)
    assert node.free_capacity() == (1, 3)

    node.release(first.allocation_id)
    assert node.free_capacity() == (4, 4)
    with pytest.raises(UnknownAllocation):
        node.release(first.allocation_id)


def test_allocation_requirements_must_be_positive(node):
    with pytest.raises(ValueError):
        node.allocate("vnf-1", 0, 1)


def test_allocation_events_replay_cleanly(node, recorder):
    allocation = node.allocate("vnf-1", 2, 2)
    node.allocate("vnf-2", 1, 1)
    node.release(allocation.allocation_id)
    events = recorder.of_kind("allocation")
    assert [e["op"] for e in events] == ["allocate", "allocate", "release"]
    assert events[-1]["free_cpu"] == 3
    assert verify_trace(recorder.events) == []


def test_run_instance_needs_allocation_and_cached_image(node, caches, image_id):
    with pytest.raises(NoAllocation):
        node.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")
    node.allocate("vnf-1", 1, 1)
    with pytest.raises(ImageNotCached):
        node.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")

    caches.cache_insert(DomainId.VWSN1, image_id)
    handle = node.run_instance(
        image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1", service_time_ms=20
    )
    assert handle.alive
    assert handle.service_time_ms == 20
    assert node.handle("vnf-1") is handle
    assert audit_nodes([node]) == []

    node.stop_instance("vnf-1")
    assert not handle.alive
    assert node.handle("vnf-1") is None


def test_core_nodes_read_the_central_store(caches, image_id):
    core = NfviNode(NodeDescriptor("core-1", DomainId.GATEWAY_PROVIDER, 8, 8), caches)
    core.allocate("vnf-1", 1, 1)
    core.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")
    assert core.image_available(image_id)


def test_update_swaps_handler_config(node, caches, image_id):
    caches.cache_insert(DomainId.VWSN1, image_id)
    node.allocate("vnf-1", 1, 1)
    handle = node.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")
    handle.update(VnfConfig(target_url="http://app/x"))
    assert handle.config.target_url == "http://app/x"


def test_audit_flags_unallocated_instance(node, caches, image_id):
    caches.cache_insert(DomainId.VWSN1, image_id)
    allocation = node.allocate("vnf-1", 1, 1)
    node.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")
    node.release(allocation.allocation_id)
    assert audit_nodes([node]) == ["unallocated instance: vnf-1 on vwsn1-node-1"]


def test_load_meter_uses_complete_buckets():
    meter = LoadMeter(window_s=5, bucket_ms=1000)
    for at in range(0, 1000, 100):
        meter.record(at)
    for at in range(1000, 2000, 50):
        meter.record(at)
    meter.record(2500)  # current bucket is not counted
    assert meter.last_second_rate(2600) == 20
    assert meter.rate(2600) == pytest.approx(30 * 1000 / 5000)


def test_report_state_round_trips_through_dict(node, caches, image_id):
    caches.cache_insert(DomainId.VWSN1, image_id)
    node.allocate("vnf-1", 2, 1)
    handle = node.run_instance(image_id, VNFType.INFO_MODEL_PROCESSOR_1, VnfConfig(), "vnf-1")
    for at in range(0, 1000, 10):
        handle.record_arrival(at)
    state = node.report_state(1500)
    assert (state.free_cpu, state.free_mem) == (2, 3)
    assert state.instances[0].last_second_rate == 100
    assert state.instances[0].observed_load == pytest.approx(20.0)
    assert NodeState.from_dict(state.to_dict()) == state
