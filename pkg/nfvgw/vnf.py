"""
VNF execution abstraction, the four gateway functions and the static chain executor.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol

import structlog

from .codecs import (
    COAP_POST,
    CoapLiteMessage,
    CoapType,
    brand_b_reading,
    decode_brand_a,
    decode_brand_b,
    decode_coaplite,
    encode_coaplite,
    encode_senml,
    frame_http_post,
)
from .constants import SENML_CONTENT_TYPE
from .errors import BadUrl, ChainUnavailable, DropWithError, FrameError
from .lifecycle import validate_chain
from .types import ServiceChain, VnfConfig, VNFType

logger = structlog.get_logger(__name__)

# Meta keys carried by every data-plane message
META_TRACE_ID = "trace_id"
META_SENSOR_ID = "sensor_id"
META_DOMAIN = "domain"
META_SEQ = "seq"
META_STAGES = "stages"
META_EMIT = "t.emit"
META_IN = "t.in"
META_OUT = "t.out"


def stage_key(stage: str) -> str:
    return f"t.{stage}"


@dataclass(frozen=True)
class VNFMessage:
    payload: bytes
    meta: Mapping[str, str] = field(default_factory=dict)

    @property
    def trace_id(self) -> str:
        return self.meta.get(META_TRACE_ID, "")

    @property
    def stages(self) -> List[str]:
        joined = self.meta.get(META_STAGES, "")
        return joined.split(",") if joined else []

    def with_meta(self, **updates: str) -> "VNFMessage":
        meta = dict(self.meta)
        meta.update(updates)
        return VNFMessage(self.payload, meta)

    def passed(self, stage: str, payload: bytes) -> "VNFMessage":
        """Successor message after ``stage`` replaced the payload."""
        meta = dict(self.meta)
        meta[META_STAGES] = ",".join(self.stages + [stage])
        return VNFMessage(payload, meta)


Handler = Callable[[VNFMessage, VnfConfig], List[VNFMessage]]


@dataclass(frozen=True)
class VNFFunction:
    vnf_type: VNFType
    handler: Handler


def imp1_handle(msg: VNFMessage) -> VNFMessage:
    """BrandA CSV frame to SenML."""
    try:
        reading = decode_brand_a(msg.payload)
    except FrameError as exc:
        raise DropWithError(VNFType.INFO_MODEL_PROCESSOR_1.value, str(exc)) from exc
    return msg.passed(VNFType.INFO_MODEL_PROCESSOR_1.value, encode_senml([reading]))


def imp2_handle(msg: VNFMessage) -> VNFMessage:
    """BrandB binary frame to SenML, converting the raw ADC count to physical units."""
    try:
        reading = brand_b_reading(decode_brand_b(msg.payload))
    except FrameError as exc:
        raise DropWithError(VNFType.INFO_MODEL_PROCESSOR_2.value, str(exc)) from exc
    return msg.passed(VNFType.INFO_MODEL_PROCESSOR_2.value, encode_senml([reading]))


def _http_frame(stage: VNFType, senml: bytes, target: Optional[str]) -> bytes:
    if not target:
        raise DropWithError(stage.value, "no target URL configured")
    try:
        return frame_http_post(target, SENML_CONTENT_TYPE, senml)
    except BadUrl as exc:
        raise DropWithError(stage.value, str(exc)) from exc


def pc1_handle(msg: VNFMessage, target: Optional[str]) -> VNFMessage:
    """SenML over the BrandA datagram link, re-framed as an HTTP POST to ``target``."""
    stage = VNFType.PROTOCOL_CONVERTER_1
    return msg.passed(stage.value, _http_frame(stage, msg.payload, target))


def pc2_handle(msg: VNFMessage, target: Optional[str]) -> VNFMessage:
    """CoAP-lite POST carrying SenML, re-framed as an HTTP POST to ``target``."""
    stage = VNFType.PROTOCOL_CONVERTER_2
    try:
        request = decode_coaplite(msg.payload)
    except FrameError as exc:
        raise DropWithError(stage.value, str(exc)) from exc
    if request.code != COAP_POST:
        raise DropWithError(stage.value, f"CoAP-lite code 0x{request.code:02x} is not POST")
    return msg.passed(stage.value, _http_frame(stage, request.payload, target))


def wrap_coaplite(msg: VNFMessage) -> VNFMessage:
    """Carry the SenML payload over the VWSN2 inter-stage link as a confirmable POST."""
    message_id = int(msg.meta.get(META_SEQ, "0")) & 0xFFFF
    frame = encode_coaplite(
        CoapLiteMessage(
            type=CoapType.CON, code=COAP_POST, message_id=message_id, payload=msg.payload
        )
    )
    return VNFMessage(frame, msg.meta)


VNF_FUNCTIONS: Dict[VNFType, VNFFunction] = {
    VNFType.INFO_MODEL_PROCESSOR_1: VNFFunction(
        VNFType.INFO_MODEL_PROCESSOR_1, lambda msg, config: [imp1_handle(msg)]
    ),
    VNFType.INFO_MODEL_PROCESSOR_2: VNFFunction(
        VNFType.INFO_MODEL_PROCESSOR_2, lambda msg, config: [imp2_handle(msg)]
    ),
    VNFType.PROTOCOL_CONVERTER_1: VNFFunction(
        VNFType.PROTOCOL_CONVERTER_1, lambda msg, config: [pc1_handle(msg, config.target_url)]
    ),
    VNFType.PROTOCOL_CONVERTER_2: VNFFunction(
        VNFType.PROTOCOL_CONVERTER_2, lambda msg, config: [pc2_handle(msg, config.target_url)]
    ),
}


class StageRuntime(Protocol):
    """What the chain executor needs from a running VNF instance."""

    alive: bool
    busy_until_ms: int

    @property
    def service_time_ms(self) -> int: ...

    def record_arrival(self, now_ms: int) -> None: ...

    def process(self, msg: VNFMessage) -> VNFMessage: ...


@dataclass
class SensorCursor:
    """Per-sensor sequence counter and last stage completion times."""

    next_seq: int = 0
    stage_done_ms: List[int] = field(default_factory=lambda: [0, 0])

    def take_seq(self) -> int:
        seq = self.next_seq
        self.next_seq += 1
        return seq


def chain_execute(
    chain: ServiceChain,
    msg: VNFMessage,
    runtimes: Mapping[str, StageRuntime],
    now_ms: int = 0,
    cursor: Optional[SensorCursor] = None,
) -> VNFMessage:
    """
    Run ``msg`` through the chain's stages in order.

    Each instance serves one message at a time: a stage starts once the message has left
    the previous stage, the instance is free and (with a cursor) the same sensor's previous
    message has left this stage. Entry and exit times are written to the message meta.
    """
    violations = validate_chain(chain)
    if violations:
        raise ChainUnavailable(f"{chain.chain_id}: {'; '.join(violations)}")

    stage_runtimes: List[StageRuntime] = []
    for stage in chain.stages:
        runtime = runtimes.get(stage.instance_id)
        if runtime is None or not runtime.alive:
            raise ChainUnavailable(f"{chain.chain_id}: instance {stage.instance_id} is not live")
        stage_runtimes.append(runtime)

    current = msg.with_meta(**{META_IN: str(now_ms)})
    entry_ms = now_ms
    for index, (stage, runtime) in enumerate(zip(chain.stages, stage_runtimes)):
        stage_name = stage.vnf_type.value
        current = current.with_meta(**{stage_key(stage_name): str(entry_ms)})
        if stage.vnf_type is VNFType.PROTOCOL_CONVERTER_2:
            current = wrap_coaplite(current)

        start_ms = max(entry_ms, runtime.busy_until_ms)
        if cursor is not None:
            start_ms = max(start_ms, cursor.stage_done_ms[index])
        done_ms = start_ms + runtime.service_time_ms
        runtime.busy_until_ms = done_ms
        if cursor is not None:
            cursor.stage_done_ms[index] = done_ms

        runtime.record_arrival(now_ms)
        current = runtime.process(current)
        entry_ms = done_ms

    return current.with_meta(**{META_OUT: str(entry_ms)})
