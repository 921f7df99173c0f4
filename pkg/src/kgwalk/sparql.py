"""SPARQL query templates and the remote-endpoint graph backend."""

from __future__ import annotations

import logging
import re
import threading
import time
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Any, Callable

import httpx

from .errors import ArgumentError, BackendError, NotFoundError, TemplateError
from .store import FREEBASE_NS, OUTGOING, Direction, Entity, GraphStore, _check_direction

log = logging.getLogger(__name__)

QUERY_KINDS = (
    "entity_resolution",
    "relations_outgoing",
    "relations_incoming",
    "triples_aggregated",
    "cvt_relations",
)
# Not part of the published set: the incoming mirror of triples_aggregated.
_INTERNAL_KINDS = ("triples_aggregated_incoming",)

# Row caps baked into the templates; hitting one marks the result truncated.
LIMITS = {
    "entity_resolution": 100,
    "relations_outgoing": 100,
    "relations_incoming": 100,
    "triples_aggregated": 40,
    "triples_aggregated_incoming": 40,
    "cvt_relations": 50,
}

_ID_OK = re.compile(r'^[^\s{}";]+$')


@lru_cache(maxsize=None)
def _template(kind: str) -> Template:
    if kind not in QUERY_KINDS and kind not in _INTERNAL_KINDS:
        raise TemplateError(f"unknown query kind {kind!r}")
    text = resources.files("kgwalk").joinpath(f"data/sparql/{kind}.rq").read_text(encoding="utf-8")
    return Template(text)


def _placeholders(t: Template) -> list[str]:
    names = []
    for m in t.pattern.finditer(t.template):
        name = m.group("named") or m.group("braced")
        if name and name not in names:
            names.append(name)
    return names


def _escape_literal(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\r", "\\r")


def render_sparql(kind: str, bindings: dict[str, str]) -> str:
    """Render one of the query templates.

    ``entity_resolution`` takes ``name``; the relation and CVT queries take
    ``entity``; ``triples_aggregated`` takes ``entity`` and ``relation``.
    """
    t = _template(kind)
    values: dict[str, str] = {}
    for slot in _placeholders(t):
        if slot not in bindings or bindings[slot] is None or bindings[slot] == "":
            raise TemplateError(f"query {kind!r} needs binding {slot!r}")
        v = str(bindings[slot])
        if slot == "name":
            v = _escape_literal(v)
        elif not _ID_OK.match(v):
            raise TemplateError(f"binding {slot}={v!r} is not a valid identifier")
        values[slot] = v
    return t.substitute(values)


def _strip_ns(uri: str) -> str:
    return uri[len(FREEBASE_NS) :] if uri.startswith(FREEBASE_NS) else uri


_MID = re.compile(r"^[mg]\.[0-9A-Za-z_]+$")


class SparqlStore(GraphStore):
    """Read-only :class:`GraphStore` over a SPARQL 1.1 HTTP endpoint.

    Requests are POSTed as ``application/sparql-query``; transient failures
    (transport errors, 429, 5xx) are retried ``retries`` times with
    exponential backoff. Entities seen in results are cached with their names
    so CVT detection works on later lookups.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._entities: dict[str, Entity] = {}
        self.requests = 0

    # -- transport ---------------------------------------------------------

    def query(self, text: str) -> list[dict[str, dict[str, str]]]:
        headers = {
            "Content-Type": "application/sparql-query",
            "Accept": "application/sparql-results+json",
        }
        last: str = ""
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            with self._slots:
                with self._lock:
                    self.requests += 1
                try:
                    resp = self._client.post(self.endpoint, content=text.encode("utf-8"), headers=headers,
                                             timeout=self.timeout)
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(f"SPARQL endpoint rejected query: HTTP {resp.status_code}")
            try:
                return resp.json()["results"]["bindings"]
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"malformed SPARQL results: {exc}") from exc
        raise BackendError(f"SPARQL endpoint failed after {self.retries + 1} attempts ({last})")

    def _remember(self, ent: Entity) -> None:
        with self._lock:
            old = self._entities.get(ent.id)
            if old is None or (old.name is None and ent.name is not None) or len(ent.types) > len(old.types):
                self._entities[ent.id] = ent

    # -- GraphStore --------------------------------------------------------

    def has_entity(self, e: str) -> bool:
        with self._lock:
            if e in self._entities:
                return True
        return bool(_MID.match(e))

    def entity(self, e: str) -> Entity:
        with self._lock:
            ent = self._entities.get(e)
        if ent is not None:
            return ent
        if not self.has_entity(e):
            raise NotFoundError(f"unknown entity {e!r}")
        return Entity(e)

    def query_relations(self, e: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        _check_direction(direction)
        kind = "relations_outgoing" if direction == OUTGOING else "relations_incoming"
        with self._lock:
            known = self._entities.get(e)
        if direction == OUTGOING and known is not None and known.is_cvt:
            kind = "cvt_relations"
        rows = self.query(render_sparql(kind, {"entity": e}))
        rels = sorted({_strip_ns(r["relation"]["value"]) for r in rows if "relation" in r})
        return tuple(rels), len(rows) >= LIMITS[kind]

    def query_neighbors(self, e: str, r: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        _check_direction(direction)
        kind = "triples_aggregated" if direction == OUTGOING else "triples_aggregated_incoming"
        rows = self.query(render_sparql(kind, {"entity": e, "relation": r}))
        ids = []
        for row in rows:
            node = row.get("tail")
            if node is None:
                continue
            name = (row.get("preferred_name") or row.get("fallback_name") or {}).get("value")
            if node.get("type") == "uri":
                nid = _strip_ns(node["value"])
                self._remember(Entity(nid, name=name))
            else:
                nid = node["value"]
                self._remember(Entity(nid, name=nid, is_literal=True))
            ids.append(nid)
        return tuple(sorted(set(ids))), len(rows) >= LIMITS[kind]

    def find_by_name(self, name: str, *, case_insensitive: bool = False) -> list[Entity]:
        variants = [name]
        if case_insensitive:
            # Virtuoso matches language-tagged literals exactly; probe common casings.
            for v in (name.title(), name.capitalize(), name.lower(), name.upper()):
                if v not in variants:
                    variants.append(v)
        found: dict[str, tuple[str, set[str]]] = {}
        for v in variants:
            for row in self.query(render_sparql("entity_resolution", {"name": v})):
                eid = _strip_ns(row["entity"]["value"])
                entry = found.setdefault(eid, (v, set()))
                if "type" in row:
                    entry[1].add(_strip_ns(row["type"]["value"]))
            if found and not case_insensitive:
                break
        if case_insensitive:
            found = {k: v for k, v in found.items() if v[0].casefold() == name.casefold()}
        ents = [Entity(eid, name=nm, types=frozenset(ts)) for eid, (nm, ts) in sorted(found.items())]
        for ent in ents:
            self._remember(ent)
        return ents

    def stats(self) -> dict[str, Any]:
        return {"backend": "sparql", "endpoint": self.endpoint, "requests": self.requests}

    def close(self) -> None:
        self._client.close()


def parse_query_kind(kind: str) -> str:
    if kind not in QUERY_KINDS:
        raise ArgumentError(f"unknown query kind {kind!r}; expected one of {QUERY_KINDS}")
    return kind
