"""
NFV gateway emulator

Emulates an NFV-based gateway for virtualized wireless sensor networks: sensor-brand
protocol converters and information model processors packaged as VNF images, migrated
from a gateway provider's core into the sensor domains and chained per application
service, all driven by a RESTful control plane.
"""

from .config import ScenarioConfig, elasticity, prototype
from .errors import GatewayError, ScenarioFailed
from .lifecycle import lifecycle_next, validate_chain
from .mano import Mano, MigrationCostModel, ScalingPolicy, desired_instances, place
from .metrics import MetricsReport, build_report, verify_trace
from .scenario import ScenarioResult, execute, run_scenario
from .types import *

__version__ = "0.1.0"
__all__ = [
    "GatewayError",
    "Mano",
    "MetricsReport",
    "MigrationCostModel",
    "ScalingPolicy",
    "ScenarioConfig",
    "ScenarioFailed",
    "ScenarioResult",
    "build_report",
    "desired_instances",
    "elasticity",
    "execute",
    "lifecycle_next",
    "place",
    "prototype",
    "run_scenario",
    "validate_chain",
    "verify_trace",
]
