"""
Error hierarchy shared by every gateway component.

Each error carries a stable ``code`` so it can cross the loopback RPC boundary and the
REST error body ``{"error": code, "detail": string}`` without losing its identity.
"""

from typing import Dict, Type


class GatewayError(Exception):
    """Base class for gateway errors."""

    code = "gateway_error"


class IllegalTransition(GatewayError):
    code = "illegal_transition"


class FrameError(GatewayError):
    """A wire frame could not be decoded."""

    code = "frame_error"


class UnknownSensorCode(FrameError):
    code = "unknown_sensor_code"


class EmptyInput(GatewayError):
    code = "empty_input"


class MixedSensorIds(GatewayError):
    code = "mixed_sensor_ids"


class BadUrl(GatewayError):
    code = "bad_url"


class DropWithError(GatewayError):
    """A data-plane message was dropped by a VNF stage."""

    code = "dropped"

    def __init__(self, stage: str, reason: str):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason


class ChainUnavailable(GatewayError):
    code = "chain_unavailable"


class DuplicateVersion(GatewayError):
    code = "duplicate_version"


class NotFound(GatewayError):
    code = "not_found"


class IntegrityError(GatewayError):
    code = "integrity_error"


class NotVwsnDomain(GatewayError):
    code = "not_vwsn_domain"


class InsufficientCapacity(GatewayError):
    code = "insufficient_capacity"


class UnknownAllocation(GatewayError):
    code = "unknown_allocation"


class ImageNotCached(GatewayError):
    code = "image_not_cached"


class NoAllocation(GatewayError):
    code = "no_allocation"


class ImageNotFound(GatewayError):
    code = "image_not_found"


class CoreCapacityExhausted(GatewayError):
    code = "core_capacity_exhausted"


class NoFeasibleNode(GatewayError):
    code = "no_feasible_node"


class TransferFault(GatewayError):
    code = "transfer_fault"


class TransportError(GatewayError):
    """The destination service is unreachable."""

    code = "transport_error"


class ConfigError(GatewayError):
    code = "config_error"


class ScenarioFailed(GatewayError):
    code = "scenario_failed"

    def __init__(self, check: str, detail: str):
        super().__init__(f"{check}: {detail}")
        self.check = check
        self.detail = detail


class ControlError(GatewayError):
    """A control-plane request was rejected with an HTTP status."""

    code = "control_error"

    def __init__(self, status: int, error: str, detail: str = ""):
        super().__init__(f"{status} {error}: {detail}")
        self.status = status
        self.error = error
        self.detail = detail

    def to_body(self) -> Dict[str, str]:
        return {"error": self.error, "detail": self.detail}


def _collect(cls: Type[GatewayError]) -> Dict[str, Type[GatewayError]]:
    found = {cls.code: cls}
    for sub in cls.__subclasses__():
        found.update(_collect(sub))
    return found


ERRORS_BY_CODE: Dict[str, Type[GatewayError]] = _collect(GatewayError)
