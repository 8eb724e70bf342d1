import socket

import pytest
from aiohttp.test_utils import unused_port

from nfvgw.clock import VirtualScheduler
from nfvgw.config import CostModelConfig, prototype
from nfvgw.constants import EVENTS_PATH, HARNESS_HOST, LOOPBACK_ADDRESS
from nfvgw.control_plane import InitiationMonitor
from nfvgw.metrics import TraceRecorder
from nfvgw.scenario import execute
from nfvgw.split import HarnessService, merge_traces, split_addresses
from nfvgw.transport import InProcessTransport
from nfvgw.types import DomainId


def _free_port_block(count: int) -> int:
    for _ in range(50):
        base = unused_port()
        sockets = []
        try:
            for offset in range(count):
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sockets.append(sock)
                sock.bind((LOOPBACK_ADDRESS, base + offset))
            return base
        except OSError:
            continue
        finally:
            for sock in sockets:
                sock.close()
    pytest.skip("no block of free loopback ports")


def test_split_addresses_are_consecutive_loopback_ports():
    config = prototype().model_copy(update={"split_base_port": 20000})
    addresses = split_addresses(config)
    assert list(addresses.values()) == [f"{LOOPBACK_ADDRESS}:{20000 + i}" for i in range(5)]
    assert addresses[HARNESS_HOST] == f"{LOOPBACK_ADDRESS}:20004"


def test_merge_orders_by_time_then_process():
    app = [{"t": 5, "seq": 1, "kind": "emit"}, {"t": 9, "seq": 2, "kind": "delivery"}]
    vwsn1 = [{"t": 5, "seq": 1, "kind": "drop"}, {"t": 7, "seq": 2, "kind": "loss"}]
    core = [{"t": 5, "seq": 1, "kind": "lifecycle"}, {"t": 5, "seq": 2, "kind": "migration"}]
    merged = merge_traces(
        {DomainId.APPLICATION: app, DomainId.VWSN1: vwsn1, DomainId.GATEWAY_PROVIDER: core}
    )
    assert [e["kind"] for e in merged] == [
        "lifecycle",
        "migration",
        "drop",
        "emit",
        "loss",
        "delivery",
    ]
    assert [e["seq"] for e in merged] == list(range(1, 7))
    # the per-process traces are left as they were
    assert app[1]["seq"] == 2


async def test_harness_feeds_relayed_events_to_the_monitor():
    clock = VirtualScheduler()
    monitor = InitiationMonitor(TraceRecorder(clock), clock)
    leg = monitor.watch(DomainId.VWSN1, "svc-1")
    transport = InProcessTransport()
    harness = HarnessService(HARNESS_HOST, monitor)
    transport.register(harness)

    url = f"http://{HARNESS_HOST}{EVENTS_PATH}"
    for seq, iface in enumerate(("rq-s", "rq-g", "g-i"), start=1):
        event = {
            "t": seq,
            "seq": seq,
            "kind": "control",
            "iface": iface,
            "provider": "vwsn1",
            "request_id": "svc-1",
            "purpose": "service",
            "duplicate": False,
        }
        assert (await transport.post_json(url, event)).status == 204
    assert (leg.last_leg, leg.status) == ("g-i", "running")
    assert harness.relayed == 3
    assert (await transport.post_json(url, [1, 2])).status == 400


async def test_prototype_runs_across_domain_processes():
    config = prototype(seed=7, duration_s=3).model_copy(
        update={
            "processes": "split",
            "drain_s": 2,
            "split_base_port": _free_port_block(5),
            "cost_model": CostModelConfig(bandwidth_bytes_per_s=1_000_000_000, boot_time_ms=200),
        }
    )
    result = await execute(config)

    report = result.report
    assert report.emitted == 24
    assert report.delivered == 24
    assert report.delivered_by_domain == {"vwsn1": 18, "vwsn2": 6}
    assert result.failures() == []
    outcomes = {e["provider"]: e["status"] for e in result.events if e["kind"] == "initiation"}
    assert outcomes == {"vwsn1": "complete", "vwsn2": "complete"}
    assert report.control_by_iface == {"ack": 2, "g-i": 2, "rq-g": 2, "rq-s": 2}

    assert not [e for e in result.events if e["kind"] == "process"]
    assert [e["seq"] for e in result.events] == list(range(1, len(result.events) + 1))
    # the VWSN processes own the migrated instances and terminate them when stopped
    assert len(report.migrations) == 4
    terminated = {
        e["domain"] for e in result.events if e["kind"] == "lifecycle" and e["to"] == "terminated"
    }
    assert terminated == {"vwsn1", "vwsn2"}
