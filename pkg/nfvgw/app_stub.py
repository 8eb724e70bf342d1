"""
Application domain stub: issues service requests, accepts ACKs and receives the SenML
measurements delivered by the chains.
"""

from dataclasses import dataclass, field
from typing import Awaitable, Callable, Dict, List, Optional, Set

import structlog

from .codecs import SENML_BASE_NAME_PREFIX, decode_senml
from .constants import DEFAULT_CALLBACK_PATH, TRACE_ID_HEADER, TRACE_META_HEADER
from .control_plane import ControlChannel, ControlService, ServiceAckBody, parse_body
from .errors import FrameError, GatewayError
from .metrics import TraceRecorder
from .transport import Headers, Response
from .types import AnyObject, ServiceRequest
from .utils import safe_json_parse
from .vnf import META_EMIT, META_IN, META_OUT, META_SENSOR_ID, META_SEQ, META_STAGES, stage_key

logger = structlog.get_logger(__name__)

AckCallback = Callable[[ServiceAckBody], Optional[Awaitable[None]]]


@dataclass
class Delivery:
    trace_id: str
    sensor_id: str
    domain: str
    values: List[AnyObject] = field(default_factory=list)


def _ms(meta: AnyObject, key: str) -> Optional[int]:
    try:
        return int(meta[key])
    except (KeyError, TypeError, ValueError):
        return None


def latency_breakdown(meta: AnyObject, now_ms: int) -> Dict[str, int]:
    """Split the end-to-end latency of one delivery into its hops."""
    stages = [stage for stage in str(meta.get(META_STAGES, "")).split(",") if stage]
    emit = _ms(meta, META_EMIT)
    entered = _ms(meta, META_IN)
    left = _ms(meta, META_OUT)
    if emit is None or entered is None or left is None or len(stages) != 2:
        return {}
    first = _ms(meta, stage_key(stages[0]))
    second = _ms(meta, stage_key(stages[1]))
    if first is None or second is None:
        return {}
    return {
        "ingress": entered - emit,
        "stage0": second - first,
        "stage1": left - second,
        "egress": now_ms - left,
    }


class ApplicationStub(ControlService):
    """The application domain."""

    name = "application"

    def __init__(
        self,
        host: str,
        channel: ControlChannel,
        recorder: TraceRecorder,
        on_ack: Optional[AckCallback] = None,
        callback_path: str = DEFAULT_CALLBACK_PATH,
    ):
        super().__init__(host, channel, recorder)
        self.on_ack = on_ack
        self.callback_path = callback_path
        self.acks: Dict[str, ServiceAckBody] = {}
        self.deliveries: List[Delivery] = []
        self.invalid = 0
        self.duplicates = 0
        self._seen: Set[str] = set()
        self.add_route("POST", "/ack", self.handle_ack)
        self.add_route("POST", callback_path, self.receive_measurement)

    @property
    def callback_url(self) -> str:
        return f"http://{self.host}{self.callback_path}"

    def request_service(self, provider_url: str, request: ServiceRequest) -> None:
        """Send Rq-S to a VWSN provider."""

        def on_reply(response: Optional[Response], error: Optional[GatewayError]) -> None:
            if error is not None:
                logger.error("Service request undeliverable", request_id=request.request_id)
            elif response is not None and not response.ok:
                logger.error(
                    "Service request refused",
                    request_id=request.request_id,
                    status=response.status,
                    body=response.json_body(),
                )

        logger.info("Requesting service", request_id=request.request_id, provider=provider_url)
        self.channel.send(provider_url, request.to_dict(), on_reply)

    async def handle_ack(self, body: bytes, headers: Headers) -> Response:
        ack: ServiceAckBody = parse_body(ServiceAckBody, body)
        key = f"{ack.provider.value}/{ack.request_id}"
        if key in self.acks:
            self.record_control(
                "ack", ack.provider, ack.request_id, duplicate=True, status=ack.status
            )
            return Response.empty(204)
        self.acks[key] = ack
        self.record_control("ack", ack.provider, ack.request_id, status=ack.status)
        logger.info(
            "Service acknowledged",
            provider=ack.provider.value,
            request_id=ack.request_id,
            status=ack.status,
            reason=ack.reason,
        )
        if self.on_ack is not None:
            result = self.on_ack(ack)
            if result is not None:
                await result
        return Response.empty(204)

    async def receive_measurement(self, body: bytes, headers: Headers) -> Response:
        now_ms = self.clock.now_ms
        trace_id = headers.get(TRACE_ID_HEADER.lower(), "")
        meta = safe_json_parse(headers.get(TRACE_META_HEADER.lower(), "{}"), default={}) or {}
        try:
            pack = decode_senml(body)
        except FrameError as exc:
            self.invalid += 1
            self.recorder.record(
                "delivery",
                trace_id=trace_id,
                sensor_id=meta.get(META_SENSOR_ID),
                domain=meta.get("domain"),
                valid=False,
                duplicate=False,
                reason=str(exc),
            )
            return Response.json(400, {"error": FrameError.code, "detail": str(exc)})

        duplicate = bool(trace_id) and trace_id in self._seen
        self._seen.add(trace_id)
        if duplicate:
            self.duplicates += 1
        sensor_id = str(pack[0]["bn"])[len(SENML_BASE_NAME_PREFIX):]
        emit = _ms(meta, META_EMIT)
        self.recorder.record(
            "delivery",
            trace_id=trace_id,
            sensor_id=sensor_id,
            domain=meta.get("domain"),
            seq=_ms(meta, META_SEQ),
            stages=[s for s in str(meta.get(META_STAGES, "")).split(",") if s],
            valid=True,
            duplicate=duplicate,
            value=pack[0]["v"],
            latency_ms=now_ms - emit if emit is not None else None,
            breakdown=latency_breakdown(meta, now_ms),
        )
        if not duplicate:
            self.deliveries.append(Delivery(trace_id, sensor_id, str(meta.get("domain")), pack))
        return Response.empty(204)
