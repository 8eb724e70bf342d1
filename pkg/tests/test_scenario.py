import asyncio

import pytest
from click.testing import CliRunner

from nfvgw.cli import cli
from nfvgw.clock import VirtualScheduler
from nfvgw.config import FaultConfig, ScenarioConfig, elasticity, prototype
from nfvgw.metrics import load_trace
from nfvgw.scenario import build_deployment, execute, initiation_sequence
from nfvgw.transport import InProcessTransport
from nfvgw.types import LifecycleState


@pytest.fixture(scope="module")
def prototype_result():
    return asyncio.run(execute(prototype(seed=7, duration_s=60)))


def test_prototype_delivers_everything(prototype_result):
    report = prototype_result.report
    assert report.emitted == 480
    assert report.delivered == 480
    assert report.delivered_by_domain == {"vwsn1": 360, "vwsn2": 120}
    assert (report.lost, report.in_flight, report.invalid) == (0, 0, 0)
    assert prototype_result.failures() == []


def test_prototype_control_overhead(prototype_result):
    report = prototype_result.report
    assert report.control_messages == 8
    assert report.control_by_iface == {"ack": 2, "g-i": 2, "rq-g": 2, "rq-s": 2}
    assert report.overhead == pytest.approx(8 / 480)


def test_prototype_initiation_and_migrations(prototype_result):
    outcomes = {
        e["provider"]: e["status"] for e in prototype_result.events if e["kind"] == "initiation"
    }
    assert outcomes == {"vwsn1": "complete", "vwsn2": "complete"}
    assert [(m["cache"], m["delay_ms"]) for m in prototype_result.report.migrations] == [
        ("miss", 3000)
    ] * 4
    assert prototype_result.violations == []
    assert prototype_result.audit == []


def test_prototype_latency_breakdown_adds_up(prototype_result):
    report = prototype_result.report
    assert report.latency_ms is not None
    assert report.latency_ms.p50 <= report.latency_ms.p95 <= report.latency_ms.max
    assert set(report.breakdown_ms) == {"ingress", "stage0", "stage1", "egress"}


async def test_seeded_runs_are_byte_identical():
    first = await execute(prototype(seed=3, duration_s=5))
    second = await execute(prototype(seed=3, duration_s=5))
    assert first.trace_bytes() == second.trace_bytes()
    other = await execute(prototype(seed=4, duration_s=5))
    assert other.trace_bytes() != first.trace_bytes()


async def test_without_sensors_there_is_no_overhead_figure():
    result = await execute(ScenarioConfig(name="idle", duration_s=5))
    assert result.report.delivered == 0
    assert result.report.overhead is None
    assert result.report.control_messages == 8
    assert result.failures() == []


async def test_gateway_down_fails_initiation():
    config = prototype(duration_s=5).model_copy(
        update={
            "faults": [FaultConfig(at_ms=0, kind="service_down", target="gateway-provider")]
        }
    )
    result = await execute(config)
    outcomes = {
        e["provider"]: (e["status"], e["last_leg"])
        for e in result.events
        if e["kind"] == "initiation"
    }
    assert outcomes == {"vwsn1": ("failed", "rq-s"), "vwsn2": ("failed", "rq-s")}
    assert result.report.emitted == 0
    assert result.failures() == []


async def test_transfer_fault_rejects_one_provider():
    config = prototype(duration_s=5).model_copy(
        update={"faults": [FaultConfig(at_ms=0, kind="transfer_fault", target="vwsn1")]}
    )
    result = await execute(config)
    outcomes = {e["provider"]: e["status"] for e in result.events if e["kind"] == "initiation"}
    assert outcomes == {"vwsn1": "rejected", "vwsn2": "complete"}
    assert result.report.delivered_by_domain == {"vwsn2": 10}
    assert result.failures() == []


async def test_replayed_control_messages_change_nothing(tmp_path):
    config = ScenarioConfig(name="replay")
    clock = VirtualScheduler()
    transport = InProcessTransport()
    deployment = build_deployment(config, clock, transport, tmp_path / "store")
    await initiation_sequence(deployment)

    def running():
        return sum(
            1
            for mano in deployment.manos.values()
            for instance in mano.instances.values()
            if instance.state is LifecycleState.RUNNING
        )

    before = running()
    seen = len(deployment.recorder.events)
    control_paths = ("/rq-s", "/rq-g", "/g-i", "/ack")
    for entry in list(transport.journal):
        if entry.url.endswith(control_paths):
            await transport.request(entry.method, entry.url, entry.body, entry.headers)
    await clock.run_until(clock.now_ms + 20_000)

    replayed = [e for e in deployment.recorder.events[seen:] if e["kind"] == "control"]
    assert replayed
    assert all(e["duplicate"] for e in replayed)
    assert before > 0
    assert running() == before


async def test_elasticity_scales_out_and_back():
    result = await execute(elasticity())
    series = [
        e
        for e in result.report.instance_series
        if e["domain"] == "vwsn1" and e["vnf_type"] == "PC1" and e["count"] > 0
    ]
    assert max(e["count"] for e in series) == 5
    assert series[-1]["count"] == 1
    assert result.report.in_flight == 0
    assert result.violations == []


def test_cli_run_writes_report_and_trace(tmp_path):
    config_path = tmp_path / "scenario.json"
    config_path.write_bytes(prototype(duration_s=3).model_dump_json().encode())
    out, trace = tmp_path / "report.json", tmp_path / "trace.jsonl"

    result = CliRunner().invoke(
        cli, ["run", "--config", str(config_path), "--out", str(out), "--trace", str(trace)]
    )
    assert result.exit_code == 0, result.output
    assert out.exists()
    assert load_trace(trace)

    verified = CliRunner().invoke(cli, ["verify", "--trace", str(trace)])
    assert verified.exit_code == 0
    assert "pass" in verified.output


def test_cli_rejects_bad_config(tmp_path):
    config_path = tmp_path / "scenario.json"
    config_path.write_text('{"providers": ["application"]}')
    result = CliRunner().invoke(cli, ["run", "--config", str(config_path)])
    assert result.exit_code != 0
    assert "invalid scenario config" in result.output
