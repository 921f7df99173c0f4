"""HTTP/JSON tool service: the two agent tools and entity resolution over
one store, for external trainers that own the policy loop."""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping

from .errors import ArgumentError, BackendError, GatewayError, KGWalkError, NotFoundError
from .toolbox import Toolbox

log = logging.getLogger("kgwalk.service")

MAX_BODY = 1 << 20
MAX_K = 1000


class RequestError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _bad(message: str) -> RequestError:
    return RequestError(400, "bad-request", message)


def _fields(body: Any, required: set[str], optional: set[str]) -> dict[str, Any]:
    if not isinstance(body, dict):
        raise _bad("request body must be a JSON object")
    missing = sorted(required - set(body))
    if missing:
        raise _bad(f"missing field(s): {', '.join(missing)}")
    unknown = sorted(set(body) - required - optional)
    if unknown:
        raise _bad(f"unknown field(s): {', '.join(unknown)}")
    return body


def _string(body: Mapping[str, Any], key: str) -> str:
    v = body[key]
    if not isinstance(v, str) or not v.strip():
        raise _bad(f"{key} must be a non-empty string")
    return v


def _count(body: Mapping[str, Any], key: str) -> int | None:
    v = body.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= MAX_K:
        raise _bad(f"{key} must be an integer in 1..{MAX_K}")
    return v


class ToolService:
    """Transport-free request handling; :func:`make_server` puts HTTP around it."""

    def __init__(self, toolbox: Toolbox):
        self.toolbox = toolbox
        self.routes: dict[tuple[str, str], Callable[[Any], dict[str, Any]]] = {
            ("POST", "/v1/tools/get_relations"): self.get_relations,
            ("POST", "/v1/tools/get_triples"): self.get_triples,
            ("POST", "/v1/resolve"): self.resolve,
        }

    def get_relations(self, body: Any) -> dict[str, Any]:
        b = _fields(body, {"entity"}, {"question", "k"})
        question = b.get("question")
        if question is not None and not isinstance(question, str):
            raise _bad("question must be a string")
        return self.toolbox.get_relations(_string(b, "entity"), question or None, _count(b, "k")).to_dict()

    def get_triples(self, body: Any) -> dict[str, Any]:
        b = _fields(body, {"entity", "relations"}, {"cap"})
        rels = b["relations"]
        if not isinstance(rels, list) or not rels or not all(isinstance(r, str) and r.strip() for r in rels):
            raise _bad("relations must be a non-empty list of non-empty strings")
        cap = _count(b, "cap")
        res = self.toolbox.get_triples(_string(b, "entity"), rels, -1 if cap is None else cap)
        return res.to_dict()

    def resolve(self, body: Any) -> dict[str, Any]:
        b = _fields(body, {"name"}, set())
        name = _string(b, "name")
        eid = self.toolbox.resolve(name)
        return {"name": name, "entity": eid, "display": self.toolbox.store.display_name(eid)}

    def health(self) -> dict[str, Any]:
        return {"status": "ok", **self.toolbox.store.stats()}

    def handle(self, method: str, path: str, raw: bytes) -> tuple[int, dict[str, Any]]:
        """Return ``(status, payload)``; never raises for any input."""
        path = path.split("?", 1)[0]
        try:
            if path == "/healthz":
                if method != "GET":
                    raise RequestError(405, "method-not-allowed", "use GET /healthz")
                return 200, self.health()
            route = self.routes.get((method, path))
            if route is None:
                if any(p == path for _, p in self.routes):
                    raise RequestError(405, "method-not-allowed", f"use POST {path}")
                raise RequestError(404, "no-route", f"no route {method} {path}")
            try:
                body = json.loads(raw.decode("utf-8")) if raw else None
            except (UnicodeDecodeError, ValueError, RecursionError) as exc:
                raise RequestError(400, "bad-json", f"malformed JSON body: {exc}") from None
            return 200, route(body)
        except RequestError as exc:
            return exc.status, {"code": exc.code, "message": exc.message}
        except NotFoundError as exc:
            return 404, {"code": "not-found", "message": str(exc)}
        except (BackendError, GatewayError) as exc:
            return 502, {"code": "backend-error", "message": str(exc)}
        except (ArgumentError, KGWalkError) as exc:
            return 400, {"code": "bad-request", "message": str(exc)}
        except Exception as exc:  # noqa: BLE001 - last-resort envelope
            log.exception("unhandled error for %s %s", method, path)
            return 500, {"code": "internal", "message": type(exc).__name__}


class _Handler(BaseHTTPRequestHandler):
    service: ToolService
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; without this, keep-alive
    # clients stall on delayed ACKs
    disable_nagle_algorithm = True

    def _respond(self, status: int, payload: dict[str, Any]) -> None:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _dispatch(self, method: str) -> None:
        start = time.perf_counter()
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            length = -1
        if length < 0 or length > MAX_BODY:
            status, payload = 413 if length > MAX_BODY else 400, {
                "code": "bad-length", "message": f"Content-Length must be within 0..{MAX_BODY}"}
            self.close_connection = True
        else:
            raw = self.rfile.read(length) if length else b""
            status, payload = self.service.handle(method, self.path, raw)
        self._respond(status, payload)
        log.info(json.dumps({"method": method, "path": self.path, "status": status,
                             "ms": round((time.perf_counter() - start) * 1000, 3)}))

    def do_GET(self) -> None:  # noqa: N802
        self._dispatch("GET")

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch("POST")

    def do_PUT(self) -> None:  # noqa: N802
        self._dispatch("PUT")

    def do_DELETE(self) -> None:  # noqa: N802
        self._dispatch("DELETE")

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass  # replaced by the structured access log above


class ToolServer(ThreadingHTTPServer):
    daemon_threads = False  # shutdown waits for in-flight requests
    block_on_close = True

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def make_server(toolbox: Toolbox, host: str = "127.0.0.1", port: int = 8080) -> ToolServer:
    handler = type("ToolHandler", (_Handler,), {"service": ToolService(toolbox)})
    return ToolServer((host, port), handler)


def serve_in_thread(toolbox: Toolbox, host: str = "127.0.0.1", port: int = 0) -> tuple[ToolServer, threading.Thread]:
    """Start a server on a background thread; stop it with ``server.shutdown(); server.server_close()``."""
    server = make_server(toolbox, host, port)
    thread = threading.Thread(target=server.serve_forever, name="kgwalk-service", daemon=True)
    thread.start()
    return server, thread

