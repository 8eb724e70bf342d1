"""
The four RESTful control interfaces (Rq-S, Rq-G, G-I, ACK), the service initiation
monitor and the data-plane ingestion endpoint that feeds the chains.

Every control message leaves through a ``ControlChannel``: it is delivered after the
control-hop latency and retried on transport failures. Every receipt of a control message
is written to the trace as a ``control`` event by the receiving service.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import orjson
import structlog
from pydantic import BaseModel, Field, StringConstraints, ValidationError, model_validator
from tenacity import (
    AsyncRetrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)
from typing_extensions import Annotated

from .clock import Scheduler, TimerHandle
from .codecs import peek_sensor_id, split_url
from .constants import (
    CONTROL_RETRY_ATTEMPTS,
    DEFAULT_CONTROL_LATENCY_MS,
    DEFAULT_LEG_TIMEOUT_MS,
    DEFAULT_LINK_LATENCY_MS,
    EMIT_TIME_HEADER,
    JSON_CONTENT_TYPE,
    NF_VI_PATH,
    TRACE_ID_HEADER,
    TRACE_META_HEADER,
)
from .errors import (
    ChainUnavailable,
    ControlError,
    CoreCapacityExhausted,
    DropWithError,
    GatewayError,
    InsufficientCapacity,
    NoFeasibleNode,
    TransportError,
)
from .image_store import ImageStore
from .lifecycle import validate_chain
from .mano import DomainLink, Mano
from .metrics import CONTROL_ORDER, Event, TraceRecorder
from .rpc import RpcClient
from .transport import Headers, Response, Service, Transport
from .types import (
    CollectionPattern,
    DomainId,
    LifecycleState,
    Quantity,
    SensorBrand,
    ServiceChain,
    ServiceRequest,
    VnfConfig,
    VNFDescriptor,
    VNFInstance,
    VNFType,
)
from .utils import stable_bucket
from .vnf import (
    META_DOMAIN,
    META_EMIT,
    META_OUT,
    META_SENSOR_ID,
    META_SEQ,
    META_TRACE_ID,
    SensorCursor,
    VNFMessage,
    chain_execute,
)

logger = structlog.get_logger(__name__)

UrlSafeId = Annotated[
    str, StringConstraints(pattern=r"^[A-Za-z0-9._~-]+$", min_length=1, max_length=128)
]


# --- message bodies ---


class PatternBody(BaseModel):
    kind: Literal["once", "periodic"]
    interval_ms: Optional[int] = None

    def to_pattern(self) -> CollectionPattern:
        return CollectionPattern(self.kind, self.interval_ms)


class ServiceRequestBody(BaseModel):
    """Rq-S: an application's sensing demand."""

    request_id: UrlSafeId
    app_callback_url: str
    quantities: List[Quantity] = Field(min_length=1)
    pattern: PatternBody

    def to_request(self) -> ServiceRequest:
        split_url(self.app_callback_url)
        return ServiceRequest(
            request_id=self.request_id,
            app_callback_url=self.app_callback_url,
            quantities=frozenset(self.quantities),
            pattern=self.pattern.to_pattern(),
        )


class DescriptorBody(BaseModel):
    vnf_type: VNFType
    image_id: str
    version: int
    cpu_units: int
    mem_units: int
    image_size_bytes: int
    per_instance_capacity: float

    def to_descriptor(self) -> VNFDescriptor:
        return VNFDescriptor.from_dict(self.model_dump(mode="json"))


class VnfRequirementBody(BaseModel):
    """Rq-G: VNFs a VWSN provider needs from the gateway provider."""

    request_id: UrlSafeId
    domain: DomainId
    vnf_descriptors: List[DescriptorBody] = Field(min_length=1)
    reply_url: str
    purpose: Literal["service", "scale"] = "service"
    service_id: UrlSafeId

    @model_validator(mode="after")
    def check_domain(self) -> "VnfRequirementBody":
        if not self.domain.is_vwsn:
            raise ValueError(f"{self.domain.value} is not a VWSN domain")
        mismatched = [
            d.vnf_type.value for d in self.vnf_descriptors if d.vnf_type.domain is not self.domain
        ]
        if mismatched:
            raise ValueError(f"descriptors {mismatched} do not serve {self.domain.value}")
        return self


class LocationBody(BaseModel):
    domain: DomainId
    node_id: str


class InstanceStatusBody(BaseModel):
    vnf_type: VNFType
    image_id: str
    status: Literal["ready", "failed"]
    instance_id: Optional[str] = None
    location: Optional[LocationBody] = None
    reason: Optional[str] = None
    retriable: bool = False


class GatewayInstanceBody(BaseModel):
    """G-I: dispatch notification listing the delivered instances."""

    request_id: UrlSafeId
    domain: DomainId
    purpose: Literal["service", "scale"] = "service"
    service_id: UrlSafeId
    instances: List[InstanceStatusBody]


class ServiceAckBody(BaseModel):
    """ACK: readiness notification to the application."""

    request_id: UrlSafeId
    provider: DomainId
    status: Literal["ready", "rejected"]
    reason: Optional[str] = None
    service_endpoint: Optional[str] = None
    quantities: List[Quantity] = Field(default_factory=list)
    pattern: Optional[PatternBody] = None


def parse_body(model: type, raw: bytes) -> Any:
    try:
        return model.model_validate_json(raw or b"{}")
    except ValidationError as exc:
        raise ControlError(400, "invalid_request", _short_errors(exc)) from exc


def _short_errors(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in error['loc']) or 'body'}: {error['msg']}"
        for error in exc.errors()
    )


# --- outbound control messages ---

ReplyCallback = Callable[[Optional[Response], Optional[GatewayError]], Optional[Awaitable[None]]]


class ControlChannel:
    """Sends control messages after the hop latency, retrying unreachable destinations."""

    def __init__(
        self,
        transport: Transport,
        clock: Scheduler,
        latency_ms: int = DEFAULT_CONTROL_LATENCY_MS,
        attempts: int = CONTROL_RETRY_ATTEMPTS,
    ):
        self.transport = transport
        self.clock = clock
        self.latency_ms = latency_ms
        self.attempts = attempts

    async def post(self, url: str, body: Any) -> Response:
        response: Optional[Response] = None
        async for attempt in AsyncRetrying(
            stop=stop_after_attempt(self.attempts),
            wait=wait_exponential(multiplier=0.1, max=2),
            retry=retry_if_exception_type(TransportError),
            sleep=self.clock.retry_sleep,
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        ):
            with attempt:
                response = await self.transport.post_json(url, body)
        assert response is not None
        return response

    def send(self, url: str, body: Any, on_reply: Optional[ReplyCallback] = None) -> TimerHandle:
        return self.clock.call_later(self.latency_ms, self._deliver, url, body, on_reply)

    async def _deliver(self, url: str, body: Any, on_reply: Optional[ReplyCallback]) -> None:
        response: Optional[Response] = None
        error: Optional[GatewayError] = None
        try:
            response = await self.post(url, body)
        except TransportError as exc:
            error = exc
            logger.warning("Control message undeliverable", url=url, error=str(exc))
        if on_reply is not None:
            result = on_reply(response, error)
            if result is not None:
                await result


class ControlService(Service):
    """Base for services that receive control messages."""

    def __init__(self, host: str, channel: ControlChannel, recorder: TraceRecorder):
        super().__init__(host)
        self.channel = channel
        self.recorder = recorder

    @property
    def clock(self) -> Scheduler:
        return self.channel.clock

    def record_control(
        self,
        iface: str,
        provider: DomainId,
        request_id: str,
        purpose: str = "service",
        duplicate: bool = False,
        **extra: Any,
    ) -> Event:
        return self.recorder.record(
            "control",
            iface=iface,
            provider=provider.value,
            request_id=request_id,
            purpose=purpose,
            duplicate=duplicate,
            **extra,
        )


# --- gateway provider ---


def remote_link(domain: DomainId, transport: Transport, host: str) -> DomainLink:
    """Link to the MANO behind ``host``'s Nf-Vi route, for domains in another process."""
    url = f"http://{host}{NF_VI_PATH}"

    async def send(frame: bytes) -> bytes:
        response = await transport.request("POST", url, frame, {"Content-Type": JSON_CONTENT_TYPE})
        if response.status != 200:
            raise TransportError(f"{url} answered {response.status}")
        return response.body

    return DomainLink(domain, RpcClient(f"{domain.value}-mano", send))


class GatewayProviderService(ControlService):
    """Rq-G endpoint of the gateway provider plus its image catalog."""

    name = "gateway-provider"

    def __init__(
        self,
        host: str,
        mano: Mano,
        targets: Dict[DomainId, DomainLink],
        store: ImageStore,
        channel: ControlChannel,
        recorder: TraceRecorder,
    ):
        super().__init__(host, channel, recorder)
        self.mano = mano
        self.targets = targets
        self.store = store
        self._results: Dict[str, Response] = {}
        # request_id -> descriptor index -> instance id, for Rq-Gs that may be sent again
        self._retriable: Dict[str, Dict[int, Optional[str]]] = {}
        self._delivered: Dict[str, Dict[int, InstanceStatusBody]] = {}
        self._attempts: Dict[str, int] = {}
        self.add_route("POST", "/rq-g", self.handle_rq_g)
        self.add_route("GET", "/images", self.list_images)

    async def list_images(self, body: bytes, headers: Headers) -> Response:
        images = [image.to_dict() for image in self.store.list_images()]
        return Response.json(200, {"images": images})

    async def handle_rq_g(self, body: bytes, headers: Headers) -> Response:
        req: VnfRequirementBody = parse_body(VnfRequirementBody, body)
        if req.request_id in self._retriable:
            self.record_control(
                "rq-g",
                req.domain,
                req.service_id,
                req.purpose,
                message_id=req.request_id,
                retry=True,
            )
            response = self._results[req.request_id]
            await self._provision(req, [item.to_descriptor() for item in req.vnf_descriptors])
            return response
        if req.request_id in self._results:
            self.record_control("rq-g", req.domain, req.service_id, req.purpose, duplicate=True)
            return self._results[req.request_id]
        self.record_control(
            "rq-g", req.domain, req.service_id, req.purpose, message_id=req.request_id
        )

        descriptors = [item.to_descriptor() for item in req.vnf_descriptors]
        unknown = []
        for descriptor in descriptors:
            image = self.store.get(descriptor.image_id)
            if image is None or image.vnf_type is not descriptor.vnf_type:
                unknown.append(descriptor.image_id)
        if unknown:
            response = Response.from_error(
                ControlError(400, "image_not_found", f"unknown images: {', '.join(unknown)}")
            )
            self._results[req.request_id] = response
            return response

        response = Response.json(202, {"request_id": req.request_id, "status": "accepted"})
        self._results[req.request_id] = response
        await self._provision(req, descriptors)
        return response

    async def _provision(
        self, req: VnfRequirementBody, descriptors: Sequence[VNFDescriptor]
    ) -> None:
        """
        Instantiate ``descriptors`` on the core and migrate them towards the requesting domain.

        A descriptor that found no feasible target node keeps its instance Instantiated on the
        core. Sending the same Rq-G again migrates that instance once more and re-provisions
        every descriptor that is not running in the target domain any longer.
        """
        target = self.targets[req.domain]
        held = self._retriable.pop(req.request_id, {})
        delivered = self._delivered.pop(req.request_id, {})
        attempt = self._attempts.get(req.request_id, 0) + 1
        self._attempts[req.request_id] = attempt
        statuses: List[Optional[InstanceStatusBody]] = [None] * len(descriptors)
        retriable: Dict[int, Optional[str]] = {}

        async def finish() -> None:
            if not all(status is not None for status in statuses):
                return
            instances = [status for status in statuses if status is not None]
            if retriable:
                self._retriable[req.request_id] = retriable
                self._delivered[req.request_id] = {
                    index: status
                    for index, status in enumerate(instances)
                    if status.status == "ready"
                }
            suffix = ".gi" if attempt == 1 else f".gi{attempt}"
            notification = GatewayInstanceBody(
                request_id=f"{req.request_id}{suffix}",
                domain=req.domain,
                purpose=req.purpose,
                service_id=req.service_id,
                instances=instances,
            )
            self.channel.send(req.reply_url, notification.model_dump(mode="json"))

        def failed(
            index: int,
            descriptor: VNFDescriptor,
            reason: str,
            instance_id: Optional[str] = None,
            kept: Optional[str] = None,
            can_retry: bool = True,
        ) -> None:
            if can_retry:
                retriable[index] = kept
            statuses[index] = InstanceStatusBody(
                vnf_type=descriptor.vnf_type,
                image_id=descriptor.image_id,
                status="failed",
                instance_id=instance_id,
                reason=reason,
                retriable=can_retry,
            )

        def on_done_for(index: int, descriptor: VNFDescriptor):
            async def on_done(instance: VNFInstance, error: Optional[GatewayError]) -> None:
                if error is not None or instance.location is None:
                    failed(index, descriptor, str(error), instance.instance_id)
                else:
                    statuses[index] = InstanceStatusBody(
                        vnf_type=descriptor.vnf_type,
                        image_id=descriptor.image_id,
                        status="ready",
                        instance_id=instance.instance_id,
                        location=LocationBody(**instance.location.to_dict()),
                    )
                await finish()

            return on_done

        for index, descriptor in enumerate(descriptors):
            previous = delivered.get(index)
            if previous is not None and await self._running_in(target, previous.instance_id):
                statuses[index] = previous
                continue
            try:
                instance = self._held_instance(held.get(index)) or self.mano.instantiate(
                    descriptor
                )
            except CoreCapacityExhausted as exc:
                failed(index, descriptor, str(exc))
                continue
            try:
                await self.mano.migrate(
                    instance.instance_id, target, on_done_for(index, descriptor)
                )
            except (NoFeasibleNode, InsufficientCapacity, TransportError) as exc:
                logger.info(
                    "VNF kept on the core until the Rq-G is sent again",
                    request_id=req.request_id,
                    instance_id=instance.instance_id,
                )
                failed(index, descriptor, str(exc), instance.instance_id, kept=instance.instance_id)
            except GatewayError as exc:
                self.mano.terminate(instance.instance_id)
                failed(index, descriptor, str(exc), instance.instance_id, can_retry=False)

        if all(status is not None for status in statuses):
            self.clock.call_later(0, finish)

    def _held_instance(self, instance_id: Optional[str]) -> Optional[VNFInstance]:
        instance = self.mano.instances.get(instance_id) if instance_id else None
        if instance is None or instance.state is not LifecycleState.INSTANTIATED:
            return None
        return instance

    @staticmethod
    async def _running_in(target: DomainLink, instance_id: Optional[str]) -> bool:
        if instance_id is None:
            return False
        states = await target.node_states()
        return any(load.instance_id == instance_id for state in states for load in state.instances)


# --- VWSN providers ---

PENDING, READY, REJECTED = "pending", "ready", "rejected"
_GI_SUFFIX = re.compile(r"\.gi\d*$")


@dataclass
class ServiceRecord:
    request: ServiceRequest
    status: str = PENDING
    chain_id: Optional[str] = None
    reason: Optional[str] = None
    cursors: Dict[str, SensorCursor] = field(default_factory=dict)


class VwsnProviderService(ControlService):
    """Rq-S and G-I endpoints of one VWSN provider and its ingestion endpoint."""

    def __init__(
        self,
        host: str,
        domain: DomainId,
        mano: Mano,
        descriptors: Dict[VNFType, VNFDescriptor],
        gateway_url: str,
        channel: ControlChannel,
        recorder: TraceRecorder,
        link_latency_ms: int = DEFAULT_LINK_LATENCY_MS,
    ):
        if not domain.is_vwsn:
            raise ValueError(f"{domain.value} is not a VWSN domain")
        super().__init__(host, channel, recorder)
        self.name = f"{domain.value}-provider"
        self.domain = domain
        self.brand = SensorBrand.BRAND_A if domain is DomainId.VWSN1 else SensorBrand.BRAND_B
        self.mano = mano
        self.descriptors = descriptors
        self.gateway_url = gateway_url
        self.link_latency_ms = link_latency_ms
        self.services: Dict[str, ServiceRecord] = {}
        self._gi_results: Dict[str, Response] = {}
        self._scale_requests: Dict[str, Tuple[str, VNFType, int]] = {}
        self._next_scale = 1

        self.mano.scale_requester = self.request_scale_up
        self.add_route("POST", "/rq-s", self.handle_rq_s)
        self.add_route("POST", "/g-i", self.handle_g_i)
        self.add_route("POST", "/ingest/{service_id}", self.ingest_sensor_data)
        self.add_route("POST", NF_VI_PATH, self.handle_nf_vi)

    async def handle_nf_vi(self, body: bytes, headers: Headers) -> Response:
        """JSON-RPC frames from the gateway provider's MANO during a migration."""
        return Response(200, self.mano.endpoint.dispatch(body))

    def endpoint_for(self, service_id: str) -> str:
        return f"http://{self.host}/ingest/{service_id}"

    def _rq_g_body(self, request_id: str, service_id: str, descriptors, purpose: str) -> dict:
        return VnfRequirementBody(
            request_id=request_id,
            domain=self.domain,
            vnf_descriptors=[DescriptorBody(**d.to_dict()) for d in descriptors],
            reply_url=f"http://{self.host}/g-i",
            purpose=purpose,
            service_id=service_id,
        ).model_dump(mode="json")

    async def handle_rq_s(self, body: bytes, headers: Headers) -> Response:
        parsed: ServiceRequestBody = parse_body(ServiceRequestBody, body)
        try:
            request = parsed.to_request()
        except (ValueError, GatewayError) as exc:
            raise ControlError(400, "invalid_request", str(exc)) from exc

        if request.request_id in self.services:
            self.record_control("rq-s", self.domain, request.request_id, duplicate=True)
            raise ControlError(409, "duplicate_request", f"{request.request_id} already received")

        self.services[request.request_id] = ServiceRecord(request)
        self.record_control("rq-s", self.domain, request.request_id)
        imp_type, pc_type = VNFType.chain_for(self.domain)
        body_out = self._rq_g_body(
            f"{request.request_id}.rqg",
            request.request_id,
            [self.descriptors[imp_type], self.descriptors[pc_type]],
            "service",
        )

        def on_reply(response: Optional[Response], error: Optional[GatewayError]) -> None:
            if error is not None or response is None or not response.ok:
                detail = str(error) if error else (response.json_body() if response else None)
                logger.warning("Rq-G refused", service_id=request.request_id, detail=detail)
                record = self.services[request.request_id]
                # an unreachable gateway leaves the request pending until the leg times out
                if response is not None and record.status == PENDING:
                    self._reject(record, request.request_id, f"gateway refused: {detail}", [])

        self.channel.send(self.gateway_url, body_out, on_reply)
        return Response.json(202, {"request_id": request.request_id, "status": PENDING})

    async def handle_g_i(self, body: bytes, headers: Headers) -> Response:
        note: GatewayInstanceBody = parse_body(GatewayInstanceBody, body)
        record = self.services.get(note.service_id)
        if record is None or note.domain is not self.domain:
            raise ControlError(404, "not_found", f"no pending request {note.service_id}")
        if note.request_id in self._gi_results:
            self.record_control("g-i", self.domain, note.service_id, note.purpose, duplicate=True)
            return self._gi_results[note.request_id]
        self.record_control("g-i", self.domain, note.service_id, note.purpose)

        if note.purpose == "scale":
            self._grow_pool(note)
        else:
            self._assemble(record, note)
        response = Response.json(200, {"request_id": note.request_id, "status": "ok"})
        self._gi_results[note.request_id] = response
        return response

    def _adopted(self, status: InstanceStatusBody) -> Optional[VNFInstance]:
        if status.status != "ready" or status.instance_id is None:
            return None
        instance = self.mano.instances.get(status.instance_id)
        if instance is None or instance.state is not LifecycleState.RUNNING:
            return None
        return instance

    def _configure(self, instance: VNFInstance, record: ServiceRecord) -> None:
        if instance.vnf_type.is_protocol_converter:
            self.mano.update(
                instance.instance_id, VnfConfig(target_url=record.request.app_callback_url)
            )

    def _assemble(self, record: ServiceRecord, note: GatewayInstanceBody) -> None:
        service_id = note.service_id
        delivered = [self._adopted(status) for status in note.instances]
        instances = [instance for instance in delivered if instance is not None]

        if len(instances) != len(note.instances):
            self._reject(record, service_id, "provisioning incomplete", instances)
            return

        # information model processor always comes first
        stages = tuple(sorted(instances, key=lambda i: not i.vnf_type.is_info_model_processor))
        chain = ServiceChain(f"{self.domain.value}-{service_id}", self.domain, stages)
        violations = validate_chain(chain)
        self.recorder.record(
            "chain",
            provider=self.domain.value,
            request_id=service_id,
            chain_id=chain.chain_id,
            stages=[stage.vnf_type.value for stage in stages],
            valid=not violations,
            violations=violations,
        )
        if violations:
            self._reject(record, service_id, "; ".join(violations), instances)
            return

        for instance in stages:
            self._configure(instance, record)
            self.mano.add_to_pool(service_id, instance)
        record.status = READY
        record.chain_id = chain.chain_id
        logger.info("Service chain ready", service_id=service_id, chain_id=chain.chain_id)
        self._send_ack(record, service_id)

    def _reject(
        self, record: ServiceRecord, service_id: str, reason: str, instances: Sequence[VNFInstance]
    ) -> None:
        for instance in instances:
            self.mano.terminate(instance.instance_id)
        record.status = REJECTED
        record.reason = reason
        logger.warning("Service rejected", service_id=service_id, reason=reason)
        self._send_ack(record, service_id)

    def _send_ack(self, record: ServiceRecord, service_id: str) -> None:
        request = record.request
        host, _ = split_url(request.app_callback_url)
        scheme = request.app_callback_url.split("://", 1)[0]
        ack = ServiceAckBody(
            request_id=service_id,
            provider=self.domain,
            status=READY if record.status == READY else REJECTED,
            reason=record.reason,
            service_endpoint=self.endpoint_for(service_id) if record.status == READY else None,
            quantities=sorted(request.quantities, key=lambda q: q.value),
            pattern=PatternBody(**request.pattern.to_dict()),
        )
        self.channel.send(f"{scheme}://{host}/ack", ack.model_dump(mode="json"))

    # --- elasticity ---

    async def request_scale_up(
        self, service_id: str, descriptor: VNFDescriptor, count: int
    ) -> None:
        request_id = f"{service_id}.scale{self._next_scale}"
        self._next_scale += 1
        self._scale_requests[request_id] = (service_id, descriptor.vnf_type, count)
        logger.info(
            "Requesting scale-up",
            service_id=service_id,
            vnf_type=descriptor.vnf_type.value,
            count=count,
        )

        def on_reply(response: Optional[Response], error: Optional[GatewayError]) -> None:
            if error is not None or response is None or not response.ok:
                self.mano.scale_settled(service_id, descriptor.vnf_type, count)

        self.channel.send(
            self.gateway_url,
            self._rq_g_body(request_id, service_id, [descriptor] * count, "scale"),
            on_reply,
        )

    def _grow_pool(self, note: GatewayInstanceBody) -> None:
        rq_id = _GI_SUFFIX.sub("", note.request_id)
        service_id, vnf_type, count = self._scale_requests.get(
            rq_id, (note.service_id, note.instances[0].vnf_type, len(note.instances))
        )
        record = self.services[service_id]
        for status in note.instances:
            instance = self._adopted(status)
            if instance is None:
                continue
            self._configure(instance, record)
            self.mano.add_to_pool(service_id, instance)
        self.mano.scale_settled(service_id, vnf_type, count)

    # --- data plane ---

    async def ingest_sensor_data(self, body: bytes, headers: Headers, service_id: str) -> Response:
        record = self.services.get(service_id)
        if record is None or record.status != READY:
            raise ControlError(404, "not_found", f"no active service {service_id}")

        now_ms = self.clock.now_ms
        sensor_id = peek_sensor_id(self.brand, body)
        cursor = record.cursors.setdefault(sensor_id, SensorCursor())

        imp_type, pc_type = VNFType.chain_for(self.domain)
        imp_pool = self.mano.pool_members(service_id, imp_type)
        pc_pool = self.mano.pool_members(service_id, pc_type)
        if not imp_pool or not pc_pool:
            raise ControlError(503, ChainUnavailable.code, f"{service_id} has no running chain")
        stages = (
            imp_pool[stable_bucket(sensor_id, len(imp_pool))],
            pc_pool[stable_bucket(sensor_id, len(pc_pool))],
        )
        chain = ServiceChain(record.chain_id or service_id, self.domain, stages)
        runtimes = {stage.instance_id: self.mano.handle(stage.instance_id) for stage in stages}

        seq = cursor.take_seq()
        trace_id = f"{service_id}:{sensor_id}:{seq}"
        message = VNFMessage(
            body,
            {
                META_TRACE_ID: trace_id,
                META_SENSOR_ID: sensor_id,
                META_DOMAIN: self.domain.value,
                META_SEQ: str(seq),
                META_EMIT: headers.get(EMIT_TIME_HEADER.lower(), str(now_ms)),
            },
        )
        try:
            output = chain_execute(chain, message, runtimes, now_ms, cursor)
        except ChainUnavailable as exc:
            raise ControlError(503, exc.code, str(exc)) from exc
        except DropWithError as exc:
            self.recorder.record(
                "drop",
                trace_id=trace_id,
                sensor_id=sensor_id,
                domain=self.domain.value,
                stage=exc.stage,
                reason=exc.reason,
            )
            return Response.empty(204)

        deliver_at = int(output.meta[META_OUT]) + self.link_latency_ms
        self.clock.call_at(deliver_at, self._deliver, output)
        return Response.empty(204)

    async def _deliver(self, output: VNFMessage) -> None:
        headers = {
            TRACE_ID_HEADER: output.trace_id,
            TRACE_META_HEADER: orjson.dumps(dict(output.meta)).decode(),
        }
        reason: Optional[str] = None
        try:
            response = await self.channel.transport.send_http(output.payload, headers)
            # 400 means the application received it and counted an invalid delivery
            if not response.ok and response.status != 400:
                reason = f"application answered {response.status}"
        except TransportError as exc:
            reason = str(exc)
        if reason is not None:
            self.recorder.record(
                "loss",
                trace_id=output.trace_id,
                sensor_id=output.meta.get(META_SENSOR_ID),
                domain=self.domain.value,
                reason=reason,
            )


# --- initiation monitor ---


@dataclass
class InitiationLeg:
    provider: DomainId
    request_id: str
    last_leg: Optional[str] = None
    status: str = "running"  # running, complete, rejected, failed
    timer: Optional[TimerHandle] = None


class InitiationMonitor:
    """
    Follows the Rq-S, Rq-G, G-I, ACK sequence of each provider independently and fails a
    sequence whose next leg does not arrive within the leg timeout.
    """

    def __init__(
        self,
        recorder: TraceRecorder,
        clock: Scheduler,
        leg_timeout_ms: int = DEFAULT_LEG_TIMEOUT_MS,
    ):
        self.recorder = recorder
        self.clock = clock
        self.leg_timeout_ms = leg_timeout_ms
        self.legs: Dict[Tuple[str, str], InitiationLeg] = {}
        recorder.subscribe(self.observe)

    def watch(self, provider: DomainId, request_id: str) -> InitiationLeg:
        leg = InitiationLeg(provider, request_id)
        self.legs[(provider.value, request_id)] = leg
        self._arm(leg)
        return leg

    @property
    def done(self) -> bool:
        return all(leg.status != "running" for leg in self.legs.values())

    def _arm(self, leg: InitiationLeg) -> None:
        if leg.timer is not None:
            leg.timer.cancel()
        leg.timer = self.clock.call_later(self.leg_timeout_ms, self._timeout, leg)

    def _timeout(self, leg: InitiationLeg) -> None:
        if leg.status != "running":
            return
        leg.status = "failed"
        self.recorder.record(
            "initiation",
            provider=leg.provider.value,
            request_id=leg.request_id,
            status="failed",
            last_leg=leg.last_leg,
        )
        logger.warning(
            "Service initiation timed out",
            provider=leg.provider.value,
            last_leg=leg.last_leg,
        )

    def observe(self, event: Event) -> None:
        """Feed one control event, recorded here or relayed from another process."""
        if event["kind"] != "control" or event.get("duplicate"):
            return
        if event.get("purpose") != "service":
            return
        leg = self.legs.get((event["provider"], event["request_id"]))
        if leg is None or leg.status != "running":
            return
        position = CONTROL_ORDER.index(leg.last_leg) + 1 if leg.last_leg else 0
        expected = CONTROL_ORDER[position]
        # a rejection ACK may arrive before G-I
        if event["iface"] == "ack":
            expected = "ack"
        elif event["iface"] != expected:
            return
        leg.last_leg = expected
        if expected != "ack":
            self._arm(leg)
            return
        if leg.timer is not None:
            leg.timer.cancel()
        leg.status = "complete" if event.get("status") == READY else "rejected"
        self.recorder.record(
            "initiation",
            provider=leg.provider.value,
            request_id=leg.request_id,
            status=leg.status,
            last_leg=leg.last_leg,
        )
