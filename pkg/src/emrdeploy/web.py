"""A small HTTP layer shared by the EMR simulator and the serving engine.

Applications are plain routers mapping (method, path pattern) to handlers.
They can be served over real sockets (``serve_app``) or called in-process
through ``LocalTransport``; both paths see identical requests and responses,
so the simulation can run in milliseconds while the HTTP surface stays real.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qsl, urlsplit

import httpx

logger = logging.getLogger(__name__)

JSON_TYPE = "application/json"
XML_TYPE = "application/xml"


class TransportError(Exception):
    """The remote endpoint could not be reached."""


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    params: dict[str, str] = field(default_factory=dict)

    def json(self) -> Any:
        if not self.body:
            raise HTTPError(400, "empty body")
        try:
            return json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HTTPError(400, f"malformed JSON: {exc}") from None


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = JSON_TYPE

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def json(self) -> Any:
        return json.loads(self.body.decode("utf-8"))

    @property
    def text(self) -> str:
        return self.body.decode("utf-8")


def json_response(payload: Any, status: int = 200) -> Response:
    return Response(status, json.dumps(payload, sort_keys=True).encode("utf-8"), JSON_TYPE)


class HTTPError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


Handler = Callable[[Request], Response]


class App:
    """Regex router. Path patterns use ``{name}`` placeholders."""

    def __init__(self, name: str = "app"):
        self.name = name
        self._routes: list[tuple[str, re.Pattern[str], Handler]] = []

    def route(self, method: str, pattern: str) -> Callable[[Handler], Handler]:
        regex = re.compile("^" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern) + "$")

        def register(fn: Handler) -> Handler:
            self._routes.append((method.upper(), regex, fn))
            return fn

        return register

    def __call__(self, request: Request) -> Response:
        path_matched = False
        for method, regex, fn in self._routes:
            m = regex.match(request.path)
            if not m:
                continue
            path_matched = True
            if method != request.method.upper():
                continue
            request.params = m.groupdict()
            try:
                return fn(request)
            except HTTPError as exc:
                return json_response({"error": exc.message}, exc.status)
            except Exception as exc:  # noqa: BLE001 - surfaced as a 500
                logger.exception("%s: unhandled error on %s %s", self.name, request.method, request.path)
                return json_response({"error": f"internal error: {exc}"}, 500)
        if path_matched:
            return json_response({"error": "method not allowed"}, 405)
        return json_response({"error": f"no route for {request.path}"}, 404)


def _split(url: str) -> tuple[str, str, dict[str, str]]:
    parts = urlsplit(url)
    base = f"{parts.scheme}://{parts.netloc}"
    return base, parts.path or "/", dict(parse_qsl(parts.query, keep_blank_values=True))


class LocalTransport:
    """Routes requests to in-process apps keyed by base URL (``http://emr.local``)."""

    def __init__(self) -> None:
        self._apps: dict[str, App] = {}

    def mount(self, base_url: str, app: App) -> None:
        self._apps[base_url.rstrip("/")] = app

    def unmount(self, base_url: str) -> None:
        self._apps.pop(base_url.rstrip("/"), None)

    def request(self, method: str, url: str, *, params: dict[str, str] | None = None,
                json_body: Any = None) -> Response:
        base, path, query = _split(url)
        app = self._apps.get(base)
        if app is None:
            raise TransportError(f"connection refused: {base}")
        if params:
            query.update({k: str(v) for k, v in params.items()})
        body = b"" if json_body is None else json.dumps(json_body).encode("utf-8")
        return app(Request(method.upper(), path, query, body))


class HttpTransport:
    """Real HTTP over ``httpx``."""

    def __init__(self, timeout: float = 10.0):
        self._client = httpx.Client(timeout=timeout)

    def request(self, method: str, url: str, *, params: dict[str, str] | None = None,
                json_body: Any = None) -> Response:
        try:
            r = self._client.request(method, url, params=params, json=json_body)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        ctype = r.headers.get("content-type", JSON_TYPE).split(";")[0]
        return Response(r.status_code, r.content, ctype)

    def close(self) -> None:
        self._client.close()


class _Handler(BaseHTTPRequestHandler):
    app: App

    def _dispatch(self) -> None:
        parts = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        query = dict(parse_qsl(parts.query, keep_blank_values=True))
        resp = self.app(Request(self.command, parts.path, query, body))
        self.send_response(resp.status)
        self.send_header("Content-Type", f"{resp.content_type}; charset=utf-8")
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        self.wfile.write(resp.body)

    do_GET = do_POST = do_DELETE = _dispatch

    def log_message(self, fmt: str, *args: Any) -> None:
        logger.debug("%s " + fmt, self.app.name, *args)


class RunningServer:
    def __init__(self, server: ThreadingHTTPServer, thread: threading.Thread):
        self._server = server
        self._thread = thread
        host, port = server.server_address[:2]
        self.url = f"http://{host}:{port}"

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> RunningServer:
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown()


def serve_app(app: App, host: str = "127.0.0.1", port: int = 0) -> RunningServer:
    """Serve ``app`` on a background thread; port 0 picks a free port."""
    handler = type(f"{app.name}Handler", (_Handler,), {"app": app})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, name=f"{app.name}-http", daemon=True)
    thread.start()
    return RunningServer(server, thread)
