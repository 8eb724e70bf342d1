import os

import hypothesis
import pytest

from nfvgw.clock import VirtualScheduler
from nfvgw.image_store import ImageCaches, ImageStore
from nfvgw.metrics import TraceRecorder
from nfvgw.types import LifecycleState, VNFDescriptor, VNFInstance, VNFType

hypothesis.settings.register_profile("fast", max_examples=10)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def make_descriptor(vnf_type: VNFType, image_id: str = "", **overrides) -> VNFDescriptor:
    fields = dict(
        vnf_type=vnf_type,
        image_id=image_id or f"img-{vnf_type.value}",
        version=1,
        cpu_units=1,
        mem_units=1,
        image_size_bytes=100_000_000,
        per_instance_capacity=50.0,
    )
    fields.update(overrides)
    return VNFDescriptor(**fields)


def make_instance(
    vnf_type: VNFType,
    instance_id: str = "",
    state: LifecycleState = LifecycleState.RUNNING,
) -> VNFInstance:
    return VNFInstance(
        instance_id=instance_id or f"vnf-{vnf_type.value.lower()}",
        descriptor=make_descriptor(vnf_type),
        state=state,
    )


@pytest.fixture
def clock():
    return VirtualScheduler()


@pytest.fixture
def recorder(clock):
    return TraceRecorder(clock)


@pytest.fixture
def store(tmp_path):
    return ImageStore(tmp_path / "store")


@pytest.fixture
def caches(store):
    return ImageCaches(store)
