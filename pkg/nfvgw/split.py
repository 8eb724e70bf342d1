"""
Split-process runs: the gateway provider and each VWSN provider are served by their own OS
process over loopback TCP.

The parent process hosts the application domain. It starts one ``nfvgw serve-domain`` child
per VNF-hosting domain, drives the scenario against their sites and, once the children were
asked to stop, merges the traces they leave behind. Every process schedules on the same
wall-clock origin, so trace times are comparable across processes.
"""

import asyncio
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import orjson
import structlog
from aiohttp import web
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_delay, wait_fixed

from .clock import RealScheduler, Scheduler
from .config import ScenarioConfig
from .constants import (
    EVENTS_PATH,
    HARNESS_HOST,
    LOOPBACK_ADDRESS,
    SHUTDOWN_PATH,
    SPLIT_START_TIMEOUT_S,
    SPLIT_STOP_TIMEOUT_S,
)
from .control_plane import InitiationMonitor
from .errors import ControlError, ScenarioFailed, TransportError
from .metrics import Event
from .nfvi import audit_nodes
from .scenario import HOSTS, ScenarioResult, arm, build_deployment, build_result, drive
from .transport import Headers, HttpTransport, Response, Service, Transport, start_site
from .types import DomainId
from .utils import safe_json_parse

logger = structlog.get_logger(__name__)

# tie-break for events stamped in the same millisecond by different processes
PROCESS_RANK: Dict[DomainId, int] = {domain: rank for rank, domain in enumerate(HOSTS)}
CHILD_LOG_LEVEL = "WARNING"


def split_addresses(config: ScenarioConfig) -> Dict[str, str]:
    """Loopback address of every logical host, on consecutive ports from split_base_port."""
    hosts = [*HOSTS.values(), HARNESS_HOST]
    return {
        host: f"{LOOPBACK_ADDRESS}:{config.split_base_port + index}"
        for index, host in enumerate(hosts)
    }


def _port(address: str) -> int:
    return int(address.rsplit(":", 1)[1])


def merge_traces(parts: Mapping[DomainId, Sequence[Event]]) -> List[Event]:
    """
    Merge per-process traces into one: ordered by time, then by process, then by each
    process's own sequence, and numbered again from 1.
    """
    tagged = [
        (event["t"], PROCESS_RANK[domain], event["seq"], event)
        for domain, events in parts.items()
        for event in events
    ]
    tagged.sort(key=lambda item: item[:3])
    return [{**event, "seq": seq} for seq, (_, _, _, event) in enumerate(tagged, start=1)]


# --- child side ---


class EventRelay:
    """Forwards a child's control events to the initiation monitor of the parent."""

    def __init__(self, transport: Transport, clock: Scheduler):
        self.transport = transport
        self.clock = clock
        self.url = f"http://{HARNESS_HOST}{EVENTS_PATH}"

    def __call__(self, event: Event) -> None:
        if event["kind"] == "control" and not event.get("duplicate"):
            self.clock.call_later(0, self._forward, event)

    async def _forward(self, event: Event) -> None:
        try:
            await self.transport.post_json(self.url, event)
        except TransportError as exc:
            logger.warning("Control event not relayed", iface=event["iface"], error=str(exc))


async def serve_domain(
    config: ScenarioConfig, domain: DomainId, store_root: Path, epoch_ms: int, outcome: Path
) -> None:
    """Serve ``domain`` until the parent posts to its shutdown route, then write the outcome."""
    clock = RealScheduler(epoch_ms)
    addresses = split_addresses(config)
    transport = HttpTransport(addresses)
    deployment = build_deployment(config, clock, transport, store_root, domains={domain})
    deployment.recorder.subscribe(EventRelay(transport, clock))
    service = deployment.services[0]
    stopping = asyncio.Event()

    async def shutdown(body: bytes, headers: Headers) -> Response:
        stopping.set()
        return Response.json(200, {"status": "stopping", "service": service.name})

    service.add_route("POST", SHUTDOWN_PATH, shutdown)
    runner = await start_site(service, LOOPBACK_ADDRESS, _port(addresses[service.host]))
    arm(deployment)
    try:
        await stopping.wait()
        await deployment.shutdown()
        await clock.close()
    finally:
        await runner.cleanup()
        await transport.close()

    payload = {
        "domain": domain.value,
        "events": deployment.recorder.events,
        "audit": audit_nodes(deployment.all_nodes()),
    }
    outcome.write_bytes(orjson.dumps(payload))
    logger.info("Domain process finished", domain=domain.value, events=len(payload["events"]))


# --- parent side ---


class HarnessService(Service):
    """Receives the control events relayed by the domain processes."""

    name = "harness"

    def __init__(self, host: str, monitor: InitiationMonitor):
        super().__init__(host)
        self.monitor = monitor
        self.relayed = 0
        self.add_route("POST", EVENTS_PATH, self.receive_event)

    async def receive_event(self, body: bytes, headers: Headers) -> Response:
        event = safe_json_parse(body)
        if not isinstance(event, dict) or "kind" not in event:
            raise ControlError(400, "invalid_request", "expected one trace event")
        self.relayed += 1
        self.monitor.observe(event)
        return Response.empty(204)


@dataclass
class DomainProcess:
    domain: DomainId
    process: asyncio.subprocess.Process
    outcome: Path

    @property
    def host(self) -> str:
        return HOSTS[self.domain]


def _child_env() -> Dict[str, str]:
    env = dict(os.environ)
    package_root = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [package_root, env.get("PYTHONPATH")]))
    return env


async def _spawn(
    domain: DomainId, config_path: Path, store_root: Path, epoch_ms: int, workdir: Path
) -> DomainProcess:
    outcome = workdir / f"{domain.value}.json"
    command = [
        sys.executable,
        "-m",
        "nfvgw",
        "--log-level",
        CHILD_LOG_LEVEL,
        "serve-domain",
        "--config",
        str(config_path),
        "--domain",
        domain.value,
        "--store",
        str(store_root),
        "--epoch-ms",
        str(epoch_ms),
        "--outcome",
        str(outcome),
    ]
    process = await asyncio.create_subprocess_exec(*command, env=_child_env())
    logger.info("Domain process started", domain=domain.value, pid=process.pid)
    return DomainProcess(domain, process, outcome)


async def _wait_ready(control: Transport, child: DomainProcess) -> None:
    async for attempt in AsyncRetrying(
        stop=stop_after_delay(SPLIT_START_TIMEOUT_S),
        wait=wait_fixed(0.1),
        retry=retry_if_exception_type(TransportError),
        reraise=True,
    ):
        with attempt:
            if child.process.returncode is not None:
                raise ScenarioFailed(
                    "process",
                    f"{child.domain.value} exited with {child.process.returncode} while starting",
                )
            response = await control.get_json(f"http://{child.host}/health")
            if not response.ok:
                raise TransportError(f"{child.host} answered {response.status}")


async def _stop(control: Transport, child: DomainProcess) -> None:
    if child.process.returncode is None:
        try:
            await control.post_json(f"http://{child.host}{SHUTDOWN_PATH}", {})
        except TransportError as exc:
            logger.warning("Domain process unreachable", domain=child.domain.value, error=str(exc))
    try:
        await asyncio.wait_for(child.process.wait(), SPLIT_STOP_TIMEOUT_S)
    except asyncio.TimeoutError:
        logger.error("Domain process did not stop", domain=child.domain.value)
        child.process.kill()
        await child.process.wait()


def _read_outcome(child: DomainProcess, now_ms: int) -> Tuple[List[Event], List[str]]:
    if child.process.returncode == 0 and child.outcome.exists():
        data = orjson.loads(child.outcome.read_bytes())
        return data["events"], data["audit"]
    detail = f"{child.domain.value} process exited with {child.process.returncode}"
    logger.error("Domain process lost", domain=child.domain.value, detail=detail)
    crashed: Event = {
        "t": now_ms,
        "seq": 1,
        "kind": "process",
        "domain": child.domain.value,
        "returncode": child.process.returncode,
    }
    return [crashed], [detail]


async def run_split(config: ScenarioConfig, store_root: Path) -> ScenarioResult:
    """Run ``config`` with every VNF-hosting domain in a process of its own."""
    epoch_ms = int(time.time() * 1000)
    clock = RealScheduler(epoch_ms)
    addresses = split_addresses(config)
    transport = HttpTransport(addresses)
    # the harness's own client ignores injected service faults
    control = HttpTransport(addresses)
    # publishes the images before any child opens the store
    deployment = build_deployment(
        config, clock, transport, store_root, domains={DomainId.APPLICATION}
    )
    _, monitor, _ = deployment.harness()
    harness = HarnessService(HARNESS_HOST, monitor)

    runners: List[web.AppRunner] = []
    children: List[DomainProcess] = []
    with tempfile.TemporaryDirectory(prefix="nfvgw-split-") as tmp:
        workdir = Path(tmp)
        config_path = workdir / "scenario.json"
        config_path.write_bytes(config.model_dump_json().encode())
        try:
            for service in (*deployment.services, harness):
                port = _port(addresses[service.host])
                runners.append(await start_site(service, LOOPBACK_ADDRESS, port))
            for domain in (DomainId.GATEWAY_PROVIDER, *config.providers):
                children.append(await _spawn(domain, config_path, store_root, epoch_ms, workdir))
            for child in children:
                await _wait_ready(control, child)

            arm(deployment)
            await drive(deployment)
            for child in sorted(children, key=lambda c: c.domain is DomainId.GATEWAY_PROVIDER):
                await _stop(control, child)

            parts: Dict[DomainId, Sequence[Event]] = {
                DomainId.APPLICATION: deployment.recorder.events
            }
            audit: List[str] = []
            for child in children:
                parts[child.domain], child_audit = _read_outcome(child, clock.now_ms)
                audit.extend(child_audit)
        finally:
            for child in children:
                if child.process.returncode is None:
                    child.process.kill()
                    await child.process.wait()
            await clock.close()
            for runner in runners:
                await runner.cleanup()
            await transport.close()
            await control.close()

    events = merge_traces(parts)
    initiated_ms = max(
        (event["t"] for event in deployment.recorder.of_kind("initiation")), default=clock.now_ms
    )
    initiation = [e for e in events if e["kind"] == "control" and e["t"] <= initiated_ms]
    logger.info("Split run merged", processes=len(children) + 1, relayed=harness.relayed)
    return build_result(config, events, audit, initiation, clock.now_ms)
