"""Chat-completion and embedding clients.

:class:`HttpGateway` talks to any OpenAI-compatible endpoint; :class:`StubGateway`
answers from a script so every pipeline stage runs offline. Both cap in-flight
requests and write one log record per request/response pair.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Callable, Mapping, Sequence, Union

import httpx
import yaml

from .errors import ArgumentError, GatewayError, ProtocolError, TemplateError

log = logging.getLogger(__name__)

PURPOSES = ("question_gen", "quality_score", "thought_gen", "rerank", "policy")
DEFAULT_TEMPERATURE = {
    "question_gen": 0.7,
    "thought_gen": 0.7,
    "quality_score": 0.0,
    "rerank": 0.0,
    "policy": 1.0,
}

Message = dict[str, str]


@dataclass(frozen=True)
class ChatRequest:
    """One chat call. ``slots`` never go over the wire; stubs may template on them."""

    messages: tuple[Message, ...]
    purpose: str
    model: str = ""
    temperature: float | None = None
    max_output_tokens: int = 1024
    slots: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ArgumentError("chat request needs at least one message")
        if self.purpose not in PURPOSES:
            raise ArgumentError(f"unknown purpose {self.purpose!r}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.purpose])
        if self.temperature < 0:
            raise ArgumentError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ArgumentError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    model: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "texts", tuple(self.texts))
        if not self.texts:
            raise ArgumentError("embedding request needs at least one text")


class RequestLog:
    """Append-only structured log; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def write(self, record: dict[str, Any]) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _check_vectors(vectors: Sequence[Sequence[float]], n: int) -> list[list[float]]:
    if len(vectors) != n:
        raise ProtocolError(f"expected {n} embeddings, got {len(vectors)}")
    out = [[float(x) for x in v] for v in vectors]
    dims = {len(v) for v in out}
    if len(dims) > 1:
        raise ProtocolError(f"embedding dimensions differ within batch: {sorted(dims)}")
    if dims == {0}:
        raise ProtocolError("empty embedding vectors")
    return out


class Gateway:
    """Shared admission control and logging; subclasses implement the calls."""

    def __init__(self, max_in_flight: int = 8, request_log: RequestLog | None = None):
        if max_in_flight < 1:
            raise ArgumentError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._count_lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.log = request_log or RequestLog()

    def _enter(self) -> None:
        self._slots.acquire()
        with self._count_lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)

    def _exit(self) -> None:
        with self._count_lock:
            self.in_flight -= 1
        self._slots.release()

    def chat(self, req: ChatRequest) -> str:
        self._enter()
        try:
            text, meta = self._chat(req)
        except Exception as exc:
            self.log.write({"kind": "chat", "purpose": req.purpose, "model": req.model,
                            "messages": list(req.messages), "error": str(exc),
                            "attempts": getattr(exc, "attempts", 1)})
            raise
        finally:
            self._exit()
        self.log.write({"kind": "chat", "purpose": req.purpose, "model": req.model,
                        "messages": list(req.messages), "response": text, **meta})
        return text

    def embed(self, req: EmbeddingRequest) -> list[list[float]]:
        self._enter()
        try:
            vectors, meta = self._embed(req)
            vectors = _check_vectors(vectors, len(req.texts))
        except Exception as exc:
            self.log.write({"kind": "embed", "model": req.model, "texts": len(req.texts), "error": str(exc)})
            raise
        finally:
            self._exit()
        self.log.write({"kind": "embed", "model": req.model, "texts": len(req.texts),
                        "dim": len(vectors[0]), **meta})
        return vectors

    def _chat(self, req: ChatRequest) -> tuple[str, dict[str, Any]]:
        raise NotImplementedError

    def _embed(self, req: EmbeddingRequest) -> tuple[list[list[float]], dict[str, Any]]:
        raise NotImplementedError


class HttpGateway(Gateway):
    """OpenAI-compatible ``/chat/completions`` and ``/embeddings`` client.

    Retries 429, 5xx and transport timeouts with exponential backoff
    (``backoff * factor**i``), giving up after ``max_attempts``.
    """

    def __init__(
        self,
        base_url: str,
        *,
        api_key: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        models: Mapping[str, str] | None = None,
        embedding_model: str = "bge-m3",
        max_attempts: int = 5,
        backoff: float = 0.5,
        backoff_factor: float = 2.0,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        request_log: RequestLog | None = None,
    ):
        super().__init__(max_in_flight, request_log)
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self.models = dict(models or {})
        self.embedding_model = embedding_model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.backoff_factor = backoff_factor
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _post(self, path: str, payload: dict[str, Any]) -> tuple[dict[str, Any], int]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        status: int | None = None
        for attempt in range(1, self.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.backoff * self.backoff_factor ** (attempt - 2))
            try:
                resp = self._client.post(f"{self.base_url}{path}", json=payload, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                status = None
                log.info("gateway %s attempt %d failed: %s", path, attempt, exc)
                continue
            status = resp.status_code
            if status == 429 or status >= 500:
                log.info("gateway %s attempt %d: HTTP %d", path, attempt, status)
                continue
            if status >= 400:
                raise GatewayError(f"HTTP {status} from {path}", status=status, attempts=attempt)
            try:
                return resp.json(), attempt
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {path}") from exc
        raise GatewayError(f"{path} failed after {self.max_attempts} attempts", status=status,
                           attempts=self.max_attempts)

    def _chat(self, req: ChatRequest) -> tuple[str, dict[str, Any]]:
        model = req.model or self.models.get(req.purpose) or self.models.get("default", "")
        payload = {
            "model": model,
            "messages": list(req.messages),
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        body, attempts = self._post("/chat/completions", payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat payload: {exc!r}") from exc
        if not isinstance(content, str):
            raise ProtocolError("chat content is not a string")
        return content, {"attempts": attempts, "status": 200}

    def _embed(self, req: EmbeddingRequest) -> tuple[list[list[float]], dict[str, Any]]:
        payload = {"model": req.model or self.embedding_model, "input": list(req.texts)}
        body, attempts = self._post("/embeddings", payload)
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [d["embedding"] for d in data]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ProtocolError(f"malformed embedding payload: {exc!r}") from exc
        return vectors, {"attempts": attempts, "status": 200}


# ---------------------------------------------------------------------------
# scripted stub
# ---------------------------------------------------------------------------

Responder = Union[str, Sequence[Any], Mapping[str, Any], Callable[[ChatRequest], str]]


def hash_embedding(text: str, dim: int = 64) -> list[float]:
    """Deterministic unit vector from a text digest; identical texts map to identical vectors."""
    raw: list[float] = []
    counter = 0
    while len(raw) < dim:
        digest = hashlib.sha256(f"{counter}:{text}".encode("utf-8")).digest()
        raw.extend((b - 127.5) / 127.5 for b in digest)
        counter += 1
    v = raw[:dim]
    norm = math.sqrt(sum(x * x for x in v)) or 1.0
    return [x / norm for x in v]


class StubScript:
    """Canned responses keyed by purpose.

    Each purpose maps to one of:

    * a string, rendered with ``string.Template`` against the request slots;
    * a list of responses, consumed in order (``cycle=True`` wraps around);
    * ``{"keyed": {substring: response}, "default": response}``, matched
      against the request's message text in insertion order;
    * ``{"sequence": [...], "cycle": bool}``;
    * a callable ``(ChatRequest) -> str``.
    """

    def __init__(self, responses: Mapping[str, Responder], cycle: bool = False):
        unknown = set(responses) - set(PURPOSES)
        if unknown:
            raise ArgumentError(f"stub script has unknown purposes: {sorted(unknown)}")
        self.responses = dict(responses)
        self.cycle = cycle
        self._positions: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "StubScript":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        cycle = bool(data.pop("cycle", False))
        return cls(data, cycle=cycle)

    def _resolve(self, responder: Any, req: ChatRequest, key: str) -> str:
        if callable(responder):
            return responder(req)
        if isinstance(responder, str):
            return Template(responder).safe_substitute(req.slots)
        if isinstance(responder, Mapping):
            if "keyed" in responder:
                text = "\n".join(m.get("content", "") for m in req.messages)
                for needle, resp in responder["keyed"].items():
                    if needle in text:
                        return self._resolve(resp, req, f"{key}/{needle}")
                if "default" in responder:
                    return self._resolve(responder["default"], req, f"{key}/default")
                raise GatewayError(f"stub has no keyed response for purpose {req.purpose!r}")
            if "sequence" in responder:
                return self._next(responder["sequence"], bool(responder.get("cycle", self.cycle)), req, key)
            raise ArgumentError(f"unsupported stub responder mapping for {key!r}")
        if isinstance(responder, Sequence):
            return self._next(responder, self.cycle, req, key)
        raise ArgumentError(f"unsupported stub responder {type(responder).__name__}")

    def _next(self, seq: Sequence[Any], cycle: bool, req: ChatRequest, key: str) -> str:
        with self._lock:
            pos = self._positions.get(key, 0)
            if pos >= len(seq):
                if not cycle or not seq:
                    raise GatewayError(f"stub script exhausted for {key!r}")
                pos = 0
            self._positions[key] = pos + 1
        return self._resolve(seq[pos], req, f"{key}#{pos}")

    def respond(self, req: ChatRequest) -> str:
        if req.purpose not in self.responses:
            raise GatewayError(f"stub script has no responses for purpose {req.purpose!r}")
        return self._resolve(self.responses[req.purpose], req, req.purpose)


class StubGateway(Gateway):
    """Offline gateway answering from a :class:`StubScript`.

    ``embedder`` maps a text to a vector (default :func:`hash_embedding`);
    ``delay`` injects latency for concurrency tests.
    """

    def __init__(
        self,
        script: StubScript | Mapping[str, Responder] | None = None,
        *,
        embedder: Callable[[str], Sequence[float]] | Mapping[str, Sequence[float]] | None = None,
        delay: float = 0.0,
        max_in_flight: int = 8,
        request_log: RequestLog | None = None,
    ):
        super().__init__(max_in_flight, request_log)
        if script is None:
            script = StubScript({})
        self.script = script if isinstance(script, StubScript) else StubScript(script)
        self.embedder = embedder or hash_embedding
        self.delay = delay

    def _chat(self, req: ChatRequest) -> tuple[str, dict[str, Any]]:
        if self.delay:
            time.sleep(self.delay)
        return self.script.respond(req), {"attempts": 1, "stub": True}

    def _embed(self, req: EmbeddingRequest) -> tuple[list[list[float]], dict[str, Any]]:
        if self.delay:
            time.sleep(self.delay)
        if isinstance(self.embedder, Mapping):
            try:
                vectors = [list(self.embedder[t]) for t in req.texts]
            except KeyError as exc:
                raise GatewayError(f"stub has no embedding for {exc.args[0]!r}") from None
        else:
            vectors = [list(self.embedder(t)) for t in req.texts]
        return vectors, {"attempts": 1, "stub": True}


# ---------------------------------------------------------------------------
# prompt templates
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def load_prompt_template(purpose: str, directory: str | None = None) -> dict[str, Any]:
    if purpose not in PURPOSES:
        raise TemplateError(f"no prompt template for purpose {purpose!r}")
    if directory:
        text = (Path(directory) / f"{purpose}.yaml").read_text(encoding="utf-8")
    else:
        text = resources.files("kgwalk").joinpath(f"data/prompts/{purpose}.yaml").read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or "user" not in data:
        raise TemplateError(f"prompt template {purpose!r} lacks a user section")
    return data


def _slots_in(text: str) -> list[str]:
    t = Template(text)
    out = []
    for m in t.pattern.finditer(text):
        name = m.group("named") or m.group("braced")
        if name and name not in out:
            out.append(name)
    return out


def render_prompt(purpose: str, slots: Mapping[str, str], directory: str | None = None) -> list[Message]:
    """Render the versioned prompt template for ``purpose`` into chat messages."""
    tpl = load_prompt_template(purpose, directory)
    messages = []
    for role in ("system", "user"):
        text = tpl.get(role)
        if not text:
            continue
        for slot in _slots_in(text):
            if slot not in slots or slots[slot] is None:
                raise TemplateError(f"prompt {purpose!r} is missing slot {slot!r}")
        messages.append({"role": role, "content": Template(text).substitute({k: str(v) for k, v in slots.items()})})
    return messages
