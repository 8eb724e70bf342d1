"""
Scenario runner: wires every domain together, runs service initiation, streams sensor
data, applies the fault schedule and tears everything down again.
"""

import dataclasses
import hashlib
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import structlog

from .app_stub import ApplicationStub
from .clock import RealScheduler, Scheduler, VirtualScheduler
from .config import FaultConfig, ScenarioConfig
from .constants import APP_HOST, GATEWAY_HOST, VWSN1_HOST, VWSN2_HOST
from .control_plane import (
    ControlChannel,
    GatewayProviderService,
    InitiationMonitor,
    ServiceAckBody,
    VwsnProviderService,
    remote_link,
)
from .errors import ConfigError, NotFound, ScenarioFailed
from .image_store import ImageCaches, ImageStore, build_manifest
from .mano import DomainLink, Mano
from .metrics import Event, MetricsReport, TraceRecorder, build_report, verify_trace
from .nfvi import NfviNode, audit_nodes
from .sensors import SensorDriver, emulate_sensor, load_schedule, specs_by_brand
from .transport import InProcessTransport, Service, Transport
from .types import (
    CollectionPattern,
    DomainId,
    Quantity,
    SensorBrand,
    ServiceRequest,
    VNFDescriptor,
    VNFType,
)
from .utils import format_sim_time

logger = structlog.get_logger(__name__)

HOSTS: Dict[DomainId, str] = {
    DomainId.GATEWAY_PROVIDER: GATEWAY_HOST,
    DomainId.VWSN1: VWSN1_HOST,
    DomainId.VWSN2: VWSN2_HOST,
    DomainId.APPLICATION: APP_HOST,
}
BRAND_OF: Dict[DomainId, SensorBrand] = {brand.domain: brand for brand in SensorBrand}
MONITOR_STEP_MS = 10


def publish_images(store: ImageStore, config: ScenarioConfig) -> Dict[VNFType, VNFDescriptor]:
    """
    Publish one image per descriptor; the image id is the digest of its manifest. A version
    already in the store with the same manifest is reused, so every process of a split run
    resolves the same image ids.
    """
    descriptors: Dict[VNFType, VNFDescriptor] = {}
    for item in config.descriptors:
        provisional = item.to_descriptor(f"{item.vnf_type.value}-v{item.version}")
        manifest = build_manifest(provisional)
        existing = store.lookup(item.vnf_type, item.version)
        if existing is not None and existing.digest == hashlib.sha256(manifest).digest():
            image_id = existing.image_id
        else:
            image_id = store.publish_image(item.vnf_type, item.version, manifest)
        descriptors[item.vnf_type] = dataclasses.replace(provisional, image_id=image_id)
    return descriptors


ALL_DOMAINS: FrozenSet[DomainId] = frozenset(HOSTS)


@dataclass
class Deployment:
    config: ScenarioConfig
    clock: Scheduler
    transport: Transport
    recorder: TraceRecorder
    store: ImageStore
    caches: ImageCaches
    descriptors: Dict[VNFType, VNFDescriptor]
    nodes: Dict[DomainId, List[NfviNode]]
    manos: Dict[DomainId, Mano]
    gateway: Optional[GatewayProviderService]
    providers: Dict[DomainId, VwsnProviderService]
    app: Optional[ApplicationStub]
    monitor: Optional[InitiationMonitor]
    driver: Optional[SensorDriver]
    local: FrozenSet[DomainId] = ALL_DOMAINS
    started_ms: Dict[DomainId, int] = field(default_factory=dict)

    @property
    def services(self) -> List[Service]:
        services: List[Service] = list(self.providers.values())
        if self.gateway is not None:
            services.insert(0, self.gateway)
        if self.app is not None:
            services.append(self.app)
        return services

    def harness(self) -> Tuple[ApplicationStub, InitiationMonitor, SensorDriver]:
        """The application side, present only where the application domain is hosted."""
        if self.app is None or self.monitor is None or self.driver is None:
            raise ConfigError("the application domain is hosted by another process")
        return self.app, self.monitor, self.driver

    def all_nodes(self) -> List[NfviNode]:
        return [node for nodes in self.nodes.values() for node in nodes]

    def service_id(self, provider: DomainId) -> str:
        return f"{self.config.name}-{provider.value}"

    def service_request(self, provider: DomainId) -> ServiceRequest:
        app, _, _ = self.harness()
        specs = specs_by_brand(self.config.sensor_specs())[BRAND_OF[provider]]
        quantities = {quantity for spec in specs for quantity in spec.quantities}
        pattern = specs[0].pattern if specs else CollectionPattern.periodic(1000)
        return ServiceRequest(
            request_id=self.service_id(provider),
            app_callback_url=app.callback_url,
            quantities=frozenset(quantities or {Quantity.TEMPERATURE}),
            pattern=pattern,
        )

    def stream_ms(self) -> int:
        load_ms = 0
        if self.config.load is not None:
            load_ms = sum(phase.duration_s for phase in self.config.load.phases) * 1000
        return max(self.config.duration_s * 1000, load_ms)

    async def on_ack(self, ack: ServiceAckBody) -> None:
        """Start the provider's sensors once its service is ready."""
        if ack.status != "ready" or ack.service_endpoint is None:
            return
        _, _, driver = self.harness()
        provider = ack.provider
        now_ms = self.clock.now_ms
        self.started_ms[provider] = now_ms
        brand = BRAND_OF[provider]
        config = self.config
        for spec in specs_by_brand(config.sensor_specs())[brand]:
            frames = emulate_sensor(spec, config.seed, config.duration_s * 1000, start_ms=now_ms)
            driver.start(brand, ack.service_endpoint, frames)
        if config.load is not None and provider is DomainId.VWSN1:
            frames = load_schedule(
                config.load.phases, config.load.sensor_ids, config.seed, start_ms=now_ms
            )
            driver.start(brand, ack.service_endpoint, frames)

    def apply_fault(self, fault: FaultConfig) -> None:
        """
        Apply the part of ``fault`` that concerns the local domains. The process hosting the
        application records the fault once for the whole run.
        """
        if DomainId.APPLICATION in self.local:
            self.recorder.record("fault", fault=fault.kind, target=fault.target)
            logger.warning("Injecting fault", kind=fault.kind, target=fault.target)
        if fault.kind == "transfer_fault":
            core = self.manos.get(DomainId.GATEWAY_PROVIDER)
            if core is not None:
                core.arm_transfer_fault(DomainId(fault.target))
        elif fault.kind in ("service_down", "service_up"):
            host = HOSTS[DomainId(fault.target)]
            if fault.kind == "service_down":
                self.transport.mark_down(host)
            else:
                self.transport.mark_up(host)
        else:
            self._kill(fault.target)

    def _kill(self, target: str) -> None:
        if ":" in target:
            domain_name, type_name = target.split(":", 1)
            mano = self.manos.get(DomainId(domain_name))
            if mano is None:
                return
            running = mano.running(VNFType(type_name))
            if not running:
                logger.warning("No instance to kill", target=target)
                return
            mano.fail(running[0].instance_id, "injected fault")
            return
        for mano in self.manos.values():
            if target in mano.instances:
                mano.fail(target, "injected fault")
                return
        if self.local == ALL_DOMAINS:
            raise NotFound(f"no instance {target} to kill")
        logger.debug("Instance not hosted here", target=target)

    async def shutdown(self) -> None:
        for mano in self.manos.values():
            mano.stop_reconcile()
        for domain in sorted(self.manos, key=lambda d: d is DomainId.GATEWAY_PROVIDER):
            self.manos[domain].terminate_all()


def build_deployment(
    config: ScenarioConfig,
    clock: Scheduler,
    transport: Transport,
    store_root: Union[str, Path],
    domains: Optional[Collection[DomainId]] = None,
) -> Deployment:
    """
    Wire the domains in ``domains``, all of them by default. A gateway provider built without
    its VWSN domains reaches their MANOs through ``transport``.
    """
    local = frozenset(domains) if domains is not None else ALL_DOMAINS
    recorder = TraceRecorder(clock)
    store = ImageStore(store_root)
    descriptors = publish_images(store, config)
    caches = ImageCaches(store)
    cost_model = config.cost()
    policy = config.policy.to_policy()

    nodes: Dict[DomainId, List[NfviNode]] = {}
    manos: Dict[DomainId, Mano] = {}
    for domain in (DomainId.GATEWAY_PROVIDER, *config.providers):
        if domain not in local:
            continue
        nodes[domain] = [
            NfviNode(descriptor, caches, recorder) for descriptor in config.node_descriptors(domain)
        ]
        manos[domain] = Mano(
            domain, nodes[domain], store, caches, clock, recorder, cost_model, policy
        )

    channel = ControlChannel(transport, clock, config.control_latency_ms)
    gateway: Optional[GatewayProviderService] = None
    if DomainId.GATEWAY_PROVIDER in local:
        targets: Dict[DomainId, DomainLink] = {
            provider: (
                manos[provider].link()
                if provider in manos
                else remote_link(provider, transport, HOSTS[provider])
            )
            for provider in config.providers
        }
        gateway = GatewayProviderService(
            GATEWAY_HOST, manos[DomainId.GATEWAY_PROVIDER], targets, store, channel, recorder
        )
    providers = {
        provider: VwsnProviderService(
            HOSTS[provider],
            provider,
            manos[provider],
            {t: d for t, d in descriptors.items() if t.domain is provider},
            f"http://{GATEWAY_HOST}/rq-g",
            channel,
            recorder,
            config.link_latency_ms,
        )
        for provider in config.providers
        if provider in local
    }
    app: Optional[ApplicationStub] = None
    monitor: Optional[InitiationMonitor] = None
    driver: Optional[SensorDriver] = None
    if DomainId.APPLICATION in local:
        app = ApplicationStub(APP_HOST, channel, recorder)
        monitor = InitiationMonitor(recorder, clock, config.leg_timeout_ms)
        driver = SensorDriver(transport, clock, recorder, config.link_latency_ms)

    deployment = Deployment(
        config=config,
        clock=clock,
        transport=transport,
        recorder=recorder,
        store=store,
        caches=caches,
        descriptors=descriptors,
        nodes=nodes,
        manos=manos,
        gateway=gateway,
        providers=providers,
        app=app,
        monitor=monitor,
        driver=driver,
        local=local,
    )
    if app is not None:
        app.on_ack = deployment.on_ack
    if isinstance(transport, InProcessTransport):
        for service in deployment.services:
            transport.register(service)
    return deployment


async def initiation_sequence(
    deployment: Deployment, providers: Optional[Sequence[DomainId]] = None
) -> List[Event]:
    """
    Send Rq-S to each provider and advance time until every provider's sequence completed,
    was rejected or timed out. Returns the control events recorded so far.
    """
    clock = deployment.clock
    app, monitor, _ = deployment.harness()
    for provider in providers or deployment.config.providers:
        request = deployment.service_request(provider)
        monitor.watch(provider, request.request_id)
        app.request_service(f"http://{HOSTS[provider]}/rq-s", request)
    while not monitor.done:
        await clock.run_until(clock.now_ms + MONITOR_STEP_MS)
    return deployment.recorder.of_kind("control")


@dataclass
class ScenarioResult:
    report: MetricsReport
    events: List[Event]
    violations: List[str]
    audit: List[str]
    initiation: List[Event]

    def failures(self) -> List[ScenarioFailed]:
        found: List[ScenarioFailed] = []
        if self.violations:
            found.append(ScenarioFailed("verify_trace", "; ".join(self.violations)))
        if self.report.in_flight != 0:
            found.append(
                ScenarioFailed("conservation", f"{self.report.in_flight} messages still in flight")
            )
        if self.report.invalid:
            detail = f"{self.report.invalid} invalid deliveries"
            found.append(ScenarioFailed("senml validity", detail))
        if self.audit:
            found.append(ScenarioFailed("capacity audit", "; ".join(self.audit)))
        return found

    def raise_for_failures(self) -> None:
        failures = self.failures()
        if failures:
            raise failures[0]

    def trace_bytes(self) -> bytes:
        recorder = TraceRecorder()
        recorder.events = self.events
        return recorder.to_jsonl()


def arm(deployment: Deployment) -> None:
    """Schedule the fault schedule and start reconciliation in the local VWSN domains."""
    for fault in deployment.config.faults:
        deployment.clock.call_at(fault.at_ms, deployment.apply_fault, fault)
    for provider in deployment.config.providers:
        mano = deployment.manos.get(provider)
        if mano is not None:
            mano.start_reconcile()


async def drive(deployment: Deployment) -> List[Event]:
    """Run service initiation, then stream until every sensor finished and the drain elapsed."""
    clock = deployment.clock
    initiation = await initiation_sequence(deployment)
    outcomes = deployment.recorder.of_kind("initiation")
    logger.info(
        "Service initiation finished",
        outcomes={event["provider"]: event["status"] for event in outcomes},
        at_ms=clock.now_ms,
    )

    stream_ms = deployment.stream_ms()
    end_ms = max(
        [start + stream_ms for start in deployment.started_ms.values()] or [clock.now_ms]
    )
    await clock.run_until(end_ms + deployment.config.drain_s * 1000)
    return initiation


def build_result(
    config: ScenarioConfig,
    events: List[Event],
    audit: List[str],
    initiation: List[Event],
    now_ms: int,
) -> ScenarioResult:
    report = build_report(events)
    result = ScenarioResult(
        report=report,
        events=events,
        violations=verify_trace(events),
        audit=audit,
        initiation=initiation,
    )
    logger.info(
        "Scenario finished",
        scenario=config.name,
        emitted=report.emitted,
        delivered=report.delivered,
        lost=report.lost,
        simulated=format_sim_time(now_ms),
    )
    return result


async def _run(deployment: Deployment) -> ScenarioResult:
    arm(deployment)
    initiation = await drive(deployment)
    await deployment.shutdown()
    return build_result(
        deployment.config,
        list(deployment.recorder.events),
        audit_nodes(deployment.all_nodes()),
        initiation,
        deployment.clock.now_ms,
    )


async def execute(
    config: ScenarioConfig, store_root: Optional[Union[str, Path]] = None
) -> ScenarioResult:
    """Run one scenario and return its report and trace without judging them."""
    split = config.processes == "split"
    if split and config.clock == "virtual":
        logger.warning("Split processes run on the real clock")
        config = config.model_copy(update={"clock": "real"})

    with tempfile.TemporaryDirectory(prefix="nfvgw-images-") as tmp:
        root = Path(store_root) if store_root is not None else Path(tmp)
        if split:
            from .split import run_split

            return await run_split(config, root)

        clock: Scheduler = VirtualScheduler() if config.clock == "virtual" else RealScheduler()
        transport = InProcessTransport()
        deployment = build_deployment(config, clock, transport, root)
        try:
            return await _run(deployment)
        finally:
            if isinstance(clock, RealScheduler):
                await clock.close()
            await transport.close()


async def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Run a scenario and raise ScenarioFailed naming the first failed acceptance check."""
    result = await execute(config)
    result.raise_for_failures()
    return result
