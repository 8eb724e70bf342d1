"""
HTTP plumbing shared by all domain services.

Services are plain request handlers. The in-process transport calls them directly with the
same bytes a socket would carry; the HTTP transport talks to them through aiohttp sites on
the loopback interface.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Dict, List, Mapping, Optional, Set, cast

import aiohttp
import orjson
import structlog
from aiohttp import web
from aiohttp.test_utils import make_mocked_request

from .codecs import parse_http_post, split_url
from .constants import JSON_CONTENT_TYPE
from .errors import BadUrl, ControlError, FrameError, TransportError
from .utils import safe_json_parse

logger = structlog.get_logger(__name__)

Headers = Dict[str, str]


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = JSON_CONTENT_TYPE

    @classmethod
    def json(cls, status: int, data: Any) -> "Response":
        return cls(status, orjson.dumps(data))

    @classmethod
    def empty(cls, status: int = 204) -> "Response":
        return cls(status, b"")

    @classmethod
    def from_error(cls, error: ControlError) -> "Response":
        return cls.json(error.status, error.to_body())

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def json_body(self) -> Any:
        return safe_json_parse(self.body, default=None)


RouteHandler = Callable[..., Awaitable[Response]]


class Service:
    """
    A domain's HTTP surface.

    Routes live in an aiohttp ``UrlDispatcher``. Both transports resolve requests through
    it: the HTTP sites behind a catch-all route and the in-process transport directly.
    """

    name = "service"

    def __init__(self, host: str):
        self.host = host
        self.router = web.UrlDispatcher()
        self.add_route("GET", "/health", self.health)

    def add_route(self, method: str, template: str, handler: RouteHandler) -> None:
        """``{name}`` in ``template`` matches one path segment and becomes a keyword."""
        self.router.add_route(method.upper(), template, handler)

    async def health(self, body: bytes, headers: Headers) -> Response:
        return Response.json(200, {"status": "ok", "service": self.name})

    async def handle(
        self, method: str, path: str, body: bytes, headers: Mapping[str, str]
    ) -> Response:
        route_path = path.split("?", 1)[0]
        match = await self.router.resolve(make_mocked_request(method.upper(), path))
        if match.http_exception is not None:
            status = match.http_exception.status
            code = "method_not_allowed" if status == 405 else "not_found"
            return Response.json(status, {"error": code, "detail": f"{method} {route_path}"})
        normalized = {key.lower(): value for key, value in headers.items()}
        try:
            handler = cast(RouteHandler, match.handler)
            return await handler(body, normalized, **match)
        except ControlError as error:
            return Response.from_error(error)


@dataclass
class JournalEntry:
    method: str
    url: str
    body: bytes
    headers: Headers = field(default_factory=dict)


class Transport(ABC):
    """Client side of every inter-domain hop."""

    def __init__(self) -> None:
        self.down: Set[str] = set()
        self.journal: List[JournalEntry] = []

    def mark_down(self, host: str) -> None:
        self.down.add(host)

    def mark_up(self, host: str) -> None:
        self.down.discard(host)

    async def request(
        self, method: str, url: str, body: bytes = b"", headers: Optional[Headers] = None
    ) -> Response:
        try:
            host, path = split_url(url)
        except BadUrl as exc:
            raise TransportError(str(exc)) from exc
        if host in self.down:
            raise TransportError(f"{host} is unreachable")
        sent_headers = dict(headers or {})
        self.journal.append(JournalEntry(method, url, body, sent_headers))
        return await self._send(method, host, path, body, sent_headers)

    @abstractmethod
    async def _send(
        self, method: str, host: str, path: str, body: bytes, headers: Headers
    ) -> Response:
        ...

    async def post_json(self, url: str, data: Any, headers: Optional[Headers] = None) -> Response:
        sent = {"Content-Type": JSON_CONTENT_TYPE}
        sent.update(headers or {})
        return await self.request("POST", url, orjson.dumps(data), sent)

    async def get_json(self, url: str) -> Response:
        return await self.request("GET", url)

    async def send_http(self, raw: bytes, headers: Optional[Headers] = None) -> Response:
        """Deliver a request produced by ``frame_http_post``."""
        try:
            post = parse_http_post(raw)
        except FrameError as exc:
            raise TransportError(f"unsendable HTTP frame: {exc}") from exc
        sent = {"Content-Type": post.content_type}
        sent.update(headers or {})
        return await self.request("POST", f"http://{post.host}{post.path}", post.body, sent)

    async def close(self) -> None:
        return None


class InProcessTransport(Transport):
    """Dispatches requests straight to registered services."""

    def __init__(self) -> None:
        super().__init__()
        self.services: Dict[str, Service] = {}

    def register(self, service: Service) -> None:
        self.services[service.host] = service

    async def _send(
        self, method: str, host: str, path: str, body: bytes, headers: Headers
    ) -> Response:
        service = self.services.get(host)
        if service is None:
            raise TransportError(f"no service at {host}")
        return await service.handle(method, path, body, headers)


class HttpTransport(Transport):
    """aiohttp client; logical hosts are mapped onto loopback sites."""

    def __init__(self, addresses: Mapping[str, str], timeout_s: float = 10.0):
        super().__init__()
        self.addresses = dict(addresses)
        self._timeout = aiohttp.ClientTimeout(total=timeout_s)
        self._session: Optional[aiohttp.ClientSession] = None

    async def _get_session(self) -> aiohttp.ClientSession:
        """Get or create aiohttp session."""
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(timeout=self._timeout)
        return self._session

    async def close(self) -> None:
        """Close the HTTP session."""
        if self._session and not self._session.closed:
            await self._session.close()

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        await self.close()

    async def _send(
        self, method: str, host: str, path: str, body: bytes, headers: Headers
    ) -> Response:
        address = self.addresses.get(host, host)
        session = await self._get_session()
        try:
            async with session.request(
                method, f"http://{address}{path}", data=body or None, headers=headers
            ) as response:
                payload = await response.read()
                return Response(
                    response.status,
                    payload,
                    response.headers.get("Content-Type", JSON_CONTENT_TYPE),
                )
        except aiohttp.ClientError as exc:
            raise TransportError(f"{method} {host}{path} failed: {exc}") from exc


def build_web_app(service: Service) -> web.Application:
    """Expose ``service`` as an aiohttp application."""

    async def dispatch(request: web.Request) -> web.Response:
        body = await request.read()
        response = await service.handle(
            request.method, request.path_qs, body, dict(request.headers)
        )
        if response.status == 204:
            return web.Response(status=204)
        return web.Response(
            status=response.status,
            body=response.body,
            headers={"Content-Type": response.content_type},
        )

    app = web.Application()
    app.router.add_route("*", "/{tail:.*}", dispatch)
    return app


async def start_site(service: Service, host: str, port: int) -> web.AppRunner:
    runner = web.AppRunner(build_web_app(service))
    await runner.setup()
    site = web.TCPSite(runner, host, port)
    await site.start()
    logger.info("Service listening", service=service.name, address=f"{host}:{port}")
    return runner
