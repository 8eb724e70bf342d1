"""
Loopback JSON-RPC framing for the internal Nf-Vi and Ve-Vnfm call interfaces.

Requests are ``{"method", "params", "id"}``; replies carry either ``result`` or
``error: {"code", "message"}``. Every call is serialized to bytes and parsed back, so the
same framing works whether the two ends share a process or not.
"""

from typing import Any, Awaitable, Callable, Dict, Optional

import orjson
import structlog

from .errors import ERRORS_BY_CODE, GatewayError
from .types import AnyObject
from .utils import safe_json_parse

logger = structlog.get_logger(__name__)

RpcHandler = Callable[[AnyObject], Any]
FrameSender = Callable[[bytes], Awaitable[bytes]]


class RpcError(GatewayError):
    code = "rpc_error"


def rebuild_error(code: str, message: str) -> GatewayError:
    """Recreate a GatewayError subclass from its wire code."""
    error_cls = ERRORS_BY_CODE.get(code, GatewayError)
    try:
        return error_cls(message)
    except TypeError:
        error = GatewayError(message)
        error.code = code
        return error


class RpcEndpoint:
    """Named JSON-RPC endpoint owned by one MANO."""

    def __init__(self, name: str):
        self.name = name
        self._methods: Dict[str, RpcHandler] = {}
        self._next_id = 1
        self.calls = 0

    def register(self, method: str, handler: RpcHandler) -> None:
        if method in self._methods:
            raise ValueError(f"{method} is already registered on {self.name}")
        self._methods[method] = handler

    def dispatch(self, frame: bytes) -> bytes:
        request = safe_json_parse(frame)
        if not isinstance(request, dict) or "method" not in request:
            return orjson.dumps(
                {"id": None, "error": {"code": RpcError.code, "message": "malformed request"}}
            )
        request_id = request.get("id")
        handler = self._methods.get(request["method"])
        if handler is None:
            return orjson.dumps(
                {
                    "id": request_id,
                    "error": {
                        "code": RpcError.code,
                        "message": f"unknown method {request['method']}",
                    },
                }
            )
        try:
            result = handler(request.get("params") or {})
        except GatewayError as error:
            return orjson.dumps(
                {"id": request_id, "error": {"code": error.code, "message": str(error)}}
            )
        return orjson.dumps({"id": request_id, "result": result})

    def call(self, method: str, params: Optional[AnyObject] = None) -> Any:
        request_id = self._next_id
        self._next_id += 1
        self.calls += 1
        frame = request_frame(method, params, request_id)
        return unwrap_reply(self.name, method, request_id, self.dispatch(frame))

    def client(self) -> "RpcClient":
        """Client bound to this endpoint without leaving the process."""

        async def send(frame: bytes) -> bytes:
            return self.dispatch(frame)

        return RpcClient(self.name, send)


def request_frame(method: str, params: Optional[AnyObject], request_id: int) -> bytes:
    return orjson.dumps({"method": method, "params": params or {}, "id": request_id})


def unwrap_reply(name: str, method: str, request_id: int, reply_frame: bytes) -> Any:
    reply = safe_json_parse(reply_frame)
    if not isinstance(reply, dict):
        raise RpcError(f"{name}: unreadable reply to {method}")
    if reply.get("id") != request_id:
        raise RpcError(f"{name}: reply id {reply.get('id')} does not match {request_id}")
    error = reply.get("error")
    if error:
        logger.debug("RPC call failed", endpoint=name, method=method, code=error["code"])
        raise rebuild_error(error["code"], error["message"])
    return reply.get("result")


class RpcClient:
    """
    Calling side of a remote endpoint. ``send`` carries one request frame and returns the
    reply frame, over whatever link joins the two domains.
    """

    def __init__(self, name: str, send: FrameSender):
        self.name = name
        self._send = send
        self._next_id = 1
        self.calls = 0

    async def call(self, method: str, params: Optional[AnyObject] = None) -> Any:
        request_id = self._next_id
        self._next_id += 1
        self.calls += 1
        frame = request_frame(method, params, request_id)
        return unwrap_reply(self.name, method, request_id, await self._send(frame))
