"""
Command line entry point: ``nfvgw run``, ``nfvgw verify`` and ``nfvgw demo-prototype``.
``nfvgw serve-domain`` is started by split runs for each of their domain processes.
"""

import asyncio
import sys
from pathlib import Path
from typing import Optional

import click
import structlog

from . import config as scenario_config
from .errors import ConfigError, GatewayError
from .metrics import load_trace, verify_trace
from .scenario import ScenarioResult, execute
from .split import serve_domain
from .types import DomainId
from .utils import configure_logging

logger = structlog.get_logger(__name__)

LOG_LEVELS = click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False)


def _write_outputs(result: ScenarioResult, out: Optional[Path], trace: Optional[Path]) -> None:
    report = result.report.to_json()
    if out is not None:
        out.write_bytes(report)
        logger.info("Report written", path=str(out))
    else:
        click.echo(report.decode())
    if trace is not None:
        trace.write_bytes(result.trace_bytes())
        logger.info("Trace written", path=str(trace), events=len(result.events))


def _finish(result: ScenarioResult) -> None:
    failures = result.failures()
    for failure in failures:
        click.echo(f"FAILED {failure.check}: {failure.detail}", err=True)
    if failures:
        sys.exit(1)


@click.group()
@click.option("--log-level", type=LOG_LEVELS, default="WARNING", show_default=True)
@click.option("--json-logs", is_flag=True, help="Render log lines as JSON.")
def cli(log_level: str, json_logs: bool) -> None:
    """NFV-based gateway emulator for virtualized WSNs."""
    configure_logging(log_level.upper(), json_logs)


@cli.command()
@click.option(
    "--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True
)
@click.option("--clock", type=click.Choice(["virtual", "real"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Report JSON file.")
@click.option("--trace", type=click.Path(path_type=Path), default=None, help="Trace JSONL file.")
@click.option("--processes", type=click.Choice(["single", "split"]), default=None)
def run(
    config_path: Path,
    clock: Optional[str],
    seed: Optional[int],
    out: Optional[Path],
    trace: Optional[Path],
    processes: Optional[str],
) -> None:
    """Run the scenario described by a JSON config file."""
    try:
        config = scenario_config.load(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc

    overrides = {
        key: value
        for key, value in (("clock", clock), ("seed", seed), ("processes", processes))
        if value is not None
    }
    if overrides:
        config = config.model_copy(update=overrides)

    try:
        result = asyncio.run(execute(config))
    except GatewayError as exc:
        raise click.ClickException(str(exc)) from exc
    _write_outputs(result, out, trace)
    _finish(result)


@cli.command()
@click.option("--trace", type=click.Path(exists=True, path_type=Path), required=True)
def verify(trace: Path) -> None:
    """Check a recorded trace."""
    violations = verify_trace(load_trace(trace))
    if violations:
        for violation in violations:
            click.echo(violation, err=True)
        sys.exit(1)
    click.echo("pass")


@cli.command("demo-prototype")
@click.option("--seed", type=int, default=scenario_config.DEFAULT_SEED, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--trace", type=click.Path(path_type=Path), default=None)
def demo_prototype(seed: int, out: Optional[Path], trace: Optional[Path]) -> None:
    """Six BrandA and two BrandB sensors for one simulated minute."""
    result = asyncio.run(execute(scenario_config.prototype(seed=seed)))
    _write_outputs(result, out, trace)
    report = result.report
    click.echo(
        f"delivered {report.delivered}/{report.emitted} "
        f"({', '.join(f'{k}={v}' for k, v in report.delivered_by_domain.items())}), "
        f"overhead {report.overhead}",
        err=True,
    )
    _finish(result)


@cli.command("serve-domain", hidden=True)
@click.option(
    "--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True
)
@click.option(
    "--domain", type=click.Choice([d.value for d in DomainId if d.hosts_vnfs]), required=True
)
@click.option("--store", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--epoch-ms", type=int, required=True)
@click.option("--outcome", type=click.Path(path_type=Path), required=True)
def serve_domain_command(
    config_path: Path, domain: str, store: Path, epoch_ms: int, outcome: Path
) -> None:
    """Serve one domain of a split run until the parent process stops it."""
    try:
        config = scenario_config.load(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    asyncio.run(serve_domain(config, DomainId(domain), store, epoch_ms, outcome))


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
