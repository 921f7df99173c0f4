"""Knowledge-graph storage: entities, triples, indexes, resolution and CVT flattening.

Two backends share the :class:`GraphStore` interface: :class:`InMemoryStore`
(fixtures, desk-scale graphs) and :class:`kgwalk.sparql.SparqlStore` (a remote
SPARQL endpoint).
"""

from __future__ import annotations

import abc
import logging
import re
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Iterable, Iterator, Literal, Mapping, NamedTuple, Sequence

from .errors import ArgumentError, IngestionError, NotFoundError

log = logging.getLogger(__name__)

Direction = Literal["outgoing", "incoming"]
OUTGOING: Direction = "outgoing"
INCOMING: Direction = "incoming"
DIRECTIONS: tuple[Direction, ...] = (OUTGOING, INCOMING)

FREEBASE_NS = "http://rdf.freebase.com/ns/"


@dataclass(frozen=True)
class Entity:
    """A graph node.

    ``is_literal`` marks value nodes (strings, dates, scores) that are never
    treated as compound value types even though their name equals their id.
    """

    id: str
    name: str | None = None
    types: frozenset[str] = frozenset()
    is_literal: bool = False

    @property
    def is_cvt(self) -> bool:
        if self.is_literal:
            return False
        return self.name is None or self.name == self.id

    @property
    def display(self) -> str:
        return self.name if self.name else self.id


class Triple(NamedTuple):
    head: str
    relation: str
    tail: str


def _check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ArgumentError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


class GraphStore(abc.ABC):
    """Backend-neutral read interface over a knowledge graph."""

    @abc.abstractmethod
    def has_entity(self, e: str) -> bool: ...

    @abc.abstractmethod
    def entity(self, e: str) -> Entity:
        """Return the entity record; raise :class:`NotFoundError` if unknown."""

    @abc.abstractmethod
    def query_relations(self, e: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        """Sorted relations on one side of ``e`` plus a truncation flag."""

    @abc.abstractmethod
    def query_neighbors(self, e: str, r: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        """Sorted neighbor ids of ``(e, r, direction)`` plus a truncation flag."""

    @abc.abstractmethod
    def find_by_name(self, name: str, *, case_insensitive: bool = False) -> list[Entity]: ...

    def stats(self) -> dict[str, Any]:
        return {"backend": type(self).__name__}

    # -- derived helpers -------------------------------------------------

    def relations(self, e: str, direction: Direction) -> tuple[str, ...]:
        return self.query_relations(e, direction)[0]

    def neighbors(self, e: str, r: str, direction: Direction = OUTGOING) -> tuple[str, ...]:
        """Exact neighbor set of ``(e, r, direction)`` in id order."""
        return self.query_neighbors(e, r, direction)[0]

    def neighboring_relations(self, e: str) -> tuple[str, ...]:
        """Union of incoming and outgoing relations of ``e``, sorted."""
        out = self.relations(e, OUTGOING)
        inc = self.relations(e, INCOMING)
        return tuple(sorted(set(out) | set(inc)))

    def display_name(self, e: str) -> str:
        try:
            return self.entity(e).display
        except NotFoundError:
            return e


class InMemoryStore(GraphStore):
    """Immutable indexed triple store. Build it with :func:`load_triples`."""

    def __init__(self, triples: Iterable[Triple], entities: Mapping[str, Entity]):
        ts = sorted(set(triples))
        out: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
        inc: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
        for h, r, t in ts:
            out[h][r].append(t)
            inc[t][r].append(h)
        self._triples: tuple[Triple, ...] = tuple(ts)
        self._out = {e: {r: tuple(sorted(v)) for r, v in rs.items()} for e, rs in out.items()}
        self._in = {e: {r: tuple(sorted(v)) for r, v in rs.items()} for e, rs in inc.items()}
        self._entities = MappingProxyType(dict(entities))
        by_name: dict[str, list[str]] = defaultdict(list)
        by_lower: dict[str, list[str]] = defaultdict(list)
        for ent in self._entities.values():
            if ent.name is not None:
                by_name[ent.name].append(ent.id)
                by_lower[ent.name.casefold()].append(ent.id)
        self._by_name = {k: tuple(sorted(v)) for k, v in by_name.items()}
        self._by_lower = {k: tuple(sorted(v)) for k, v in by_lower.items()}
        missing = {x for t in self._triples for x in (t.head, t.tail)} - set(self._entities)
        if missing:
            raise ArgumentError(f"triples reference entities without records: {sorted(missing)[:5]}")

    @property
    def triples(self) -> tuple[Triple, ...]:
        return self._triples

    @property
    def entities(self) -> Mapping[str, Entity]:
        return self._entities

    def __len__(self) -> int:
        return len(self._triples)

    def has_entity(self, e: str) -> bool:
        return e in self._entities

    def entity(self, e: str) -> Entity:
        try:
            return self._entities[e]
        except KeyError:
            raise NotFoundError(f"unknown entity {e!r}") from None

    def _require(self, e: str) -> None:
        if e not in self._entities:
            raise NotFoundError(f"unknown entity {e!r}")

    def query_relations(self, e: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        _check_direction(direction)
        self._require(e)
        index = self._out if direction == OUTGOING else self._in
        return tuple(sorted(index.get(e, {}))), False

    def query_neighbors(self, e: str, r: str, direction: Direction) -> tuple[tuple[str, ...], bool]:
        _check_direction(direction)
        self._require(e)
        index = self._out if direction == OUTGOING else self._in
        return index.get(e, {}).get(r, ()), False

    def find_by_name(self, name: str, *, case_insensitive: bool = False) -> list[Entity]:
        ids = self._by_lower.get(name.casefold(), ()) if case_insensitive else self._by_name.get(name, ())
        return [self._entities[i] for i in ids]

    def relation_ids(self) -> tuple[str, ...]:
        return tuple(sorted({t.relation for t in self._triples}))

    def stats(self) -> dict[str, Any]:
        return {
            "backend": "memory",
            "triples": len(self._triples),
            "entities": len(self._entities),
            "relations": len(self.relation_ids()),
        }


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_RECORD_FIELDS = ("head", "relation", "tail", "head_name", "tail_name", "head_types", "tail_types")


def _split_types(value: Any) -> frozenset[str]:
    if value is None or value == "":
        return frozenset()
    if isinstance(value, str):
        return frozenset(t.strip() for t in value.split("|") if t.strip())
    return frozenset(str(t) for t in value if str(t))


def _normalize_record(index: int, rec: Any) -> dict[str, Any]:
    if isinstance(rec, Mapping):
        data = dict(rec)
    elif isinstance(rec, Sequence) and not isinstance(rec, str):
        if len(rec) > len(_RECORD_FIELDS):
            raise IngestionError(index, f"too many fields ({len(rec)})")
        data = dict(zip(_RECORD_FIELDS, rec))
    else:
        raise IngestionError(index, f"unsupported record type {type(rec).__name__}")
    for key in ("head", "relation", "tail"):
        value = data.get(key)
        if not isinstance(value, str) or not value.strip():
            raise IngestionError(index, f"missing or empty field {key!r}")
        data[key] = value.strip()
    if any(c.isspace() for c in data["relation"]):
        raise IngestionError(index, f"relation {data['relation']!r} contains whitespace")
    for key in ("head_name", "tail_name"):
        value = data.get(key)
        data[key] = value if isinstance(value, str) and value != "" else None
    return data


def load_triples(records: Iterable[Any]) -> InMemoryStore:
    """Ingest triple records and return a finalized, deduplicated store.

    A record is a sequence ``(head, relation, tail, head_name?, tail_name?,
    head_types?, tail_types?)`` or a mapping with those keys (plus an optional
    ``tail_literal`` flag). Types may be an iterable or a ``|``-joined string.
    """
    names: dict[str, str] = {}
    types: dict[str, set[str]] = defaultdict(set)
    literals: set[str] = set()
    seen: list[str] = []
    triples: list[Triple] = []

    def touch(eid: str) -> None:
        if eid not in types:
            types[eid] = set()
            seen.append(eid)

    for i, rec in enumerate(records):
        data = _normalize_record(i, rec)
        h, r, t = data["head"], data["relation"], data["tail"]
        touch(h)
        touch(t)
        if data.get("tail_literal"):
            literals.add(t)
        for eid, key in ((h, "head_name"), (t, "tail_name")):
            nm = data[key]
            if nm is not None and eid not in names:
                names[eid] = nm
        types[h] |= _split_types(data.get("head_types"))
        types[t] |= _split_types(data.get("tail_types"))
        triples.append(Triple(h, r, t))

    entities = {
        eid: Entity(
            id=eid,
            name=names.get(eid, eid if eid in literals else None),
            types=frozenset(types[eid]),
            is_literal=eid in literals,
        )
        for eid in seen
    }
    return InMemoryStore(triples, entities)


def read_tsv(path: str | Path) -> Iterator[dict[str, Any]]:
    """Read the fixture TSV format.

    Columns: head-id, relation, tail-id, head-name?, tail-name?,
    head-types?, tail-types? (types ``|``-separated). A tail written in double
    quotes is a literal value. Lines starting with ``#`` are comments.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise IngestionError(lineno, f"{path}: expected at least 3 tab-separated columns")
            rec: dict[str, Any] = dict(zip(_RECORD_FIELDS, cols))
            tail = rec["tail"].strip()
            if len(tail) >= 2 and tail.startswith('"') and tail.endswith('"'):
                rec["tail"] = tail[1:-1]
                rec["tail_literal"] = True
            yield rec


_NT_TERM = r'(<[^>]*>|"(?:[^"\\]|\\.)*"(?:@[A-Za-z][A-Za-z0-9-]*|\^\^<[^>]*>)?|_:\S+)'
_NT_LINE = re.compile(rf"^\s*{_NT_TERM}\s+{_NT_TERM}\s+{_NT_TERM}\s*\.\s*$")
_NT_ESCAPES = {"t": "\t", "n": "\n", "r": "\r", '"': '"', "\\": "\\", "b": "\b", "f": "\f", "'": "'"}


def _nt_unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        c = s[i]
        if c == "\\" and i + 1 < len(s):
            n = s[i + 1]
            if n in _NT_ESCAPES:
                out.append(_NT_ESCAPES[n])
                i += 2
                continue
            if n in "uU":
                width = 4 if n == "u" else 8
                out.append(chr(int(s[i + 2 : i + 2 + width], 16)))
                i += 2 + width
                continue
        out.append(c)
        i += 1
    return "".join(out)


def read_ntriples(path: str | Path, prefix: str = FREEBASE_NS) -> Iterator[dict[str, Any]]:
    """Read N-Triples restricted to IRIs under ``prefix``.

    ``type.object.name`` literals (English or untagged) become entity names and
    ``type.object.type`` objects become entity types; every other in-prefix
    statement becomes a triple. Out-of-prefix statements are skipped.
    """

    def local(term: str) -> str | None:
        if term.startswith("<") and term.endswith(">") and term[1:-1].startswith(prefix):
            return term[1 + len(prefix) : -1]
        return None

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = _NT_LINE.match(line)
            if not m:
                raise IngestionError(lineno, f"{path}: not an N-Triples statement")
            s, p, o = m.groups()
            subj, pred = local(s), local(p)
            if subj is None or pred is None:
                continue
            if o.startswith('"'):
                body, _, suffix = o[1:].rpartition('"')
                value = _nt_unescape(body)
                if pred == "type.object.name":
                    if suffix in ("", "@en") or suffix.startswith("^^"):
                        yield {"name_only": True, "head": subj, "head_name": value}
                    continue
                yield {"head": subj, "relation": pred, "tail": value, "tail_literal": True}
                continue
            obj = local(o)
            if obj is None:
                continue
            if pred == "type.object.type":
                yield {"types_only": True, "head": subj, "head_types": [obj]}
                continue
            yield {"head": subj, "relation": pred, "tail": obj}


def _merge_attribute_records(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    # Name/type statements carry no edge; fold them into the edge records.
    edges: list[dict[str, Any]] = []
    names: dict[str, str] = {}
    types: dict[str, set[str]] = defaultdict(set)
    for rec in records:
        if rec.get("name_only"):
            names.setdefault(rec["head"], rec["head_name"])
        elif rec.get("types_only"):
            types[rec["head"]].update(rec["head_types"])
        else:
            edges.append(rec)
    for rec in edges:
        for side in ("head", "tail"):
            eid = rec[side]
            if eid in names and not rec.get(f"{side}_name"):
                rec[f"{side}_name"] = names[eid]
            if eid in types:
                rec[f"{side}_types"] = sorted(types[eid] | _split_types(rec.get(f"{side}_types")))
    return edges


def load_store(paths: str | Path | Sequence[str | Path]) -> InMemoryStore:
    """Build an in-memory store from ``.tsv`` and ``.nt`` files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    records: list[dict[str, Any]] = []
    for p in paths:
        p = Path(p)
        if p.suffix == ".nt":
            records.extend(read_ntriples(p))
        else:
            records.extend(read_tsv(p))
    return load_triples(_merge_attribute_records(records))


# ---------------------------------------------------------------------------
# entity resolution
# ---------------------------------------------------------------------------


class _Miss:
    pass


_MISS = _Miss()


@dataclass
class ResolutionCache:
    """Thread-safe name -> entity id cache (misses are cached too).

    ``ambiguous`` collects names whose most-types rule ended in a tie.
    """

    resolved: dict[tuple[str, bool], str] = field(default_factory=dict)
    misses: set[tuple[str, bool]] = field(default_factory=set)
    ambiguous: set[str] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def get_or_compute(self, key: tuple[str, bool], compute: Callable[[], str]) -> str:
        with self._lock:
            if key in self.resolved:
                return self.resolved[key]
            if key in self.misses:
                raise NotFoundError(f"no entity named {key[0]!r}")
        try:
            value = compute()
        except NotFoundError:
            with self._lock:
                self.misses.add(key)
            raise
        with self._lock:
            return self.resolved.setdefault(key, value)


def _pick(name: str, candidates: list[Entity], cache: ResolutionCache | None) -> str:
    best = max(len(c.types) for c in candidates)
    top = sorted(c.id for c in candidates if len(c.types) == best)
    if len(top) > 1:
        log.warning("ambiguous name %r: %d candidates with %d types, picking %s", name, len(top), best, top[0])
        if cache is not None:
            with cache._lock:
                cache.ambiguous.add(name)
    return top[0]


def resolve_entity(
    store: GraphStore, name: str, cache: ResolutionCache | None = None, *, fallback: bool = True
) -> str:
    """Resolve a surface name to an entity id.

    Exact name match first (most types wins, smallest id on ties), then an
    exact id match, then a case-insensitive name match when ``fallback``.
    """
    if not isinstance(name, str) or not name.strip():
        raise ArgumentError("entity name must be a non-empty string")

    def compute() -> str:
        cands = store.find_by_name(name)
        if cands:
            return _pick(name, cands, cache)
        if store.has_entity(name):
            return name
        if fallback:
            cands = store.find_by_name(name, case_insensitive=True)
            if cands:
                return _pick(name, cands, cache)
        raise NotFoundError(f"no entity named {name!r}")

    if cache is None:
        return compute()
    return cache.get_or_compute((name, fallback), compute)


# ---------------------------------------------------------------------------
# CVT flattening
# ---------------------------------------------------------------------------


class FlattenCache:
    """Per-entity record of flattened relation ids seen so far."""

    def __init__(self) -> None:
        self._data: dict[str, set[str]] = defaultdict(set)
        self._lock = threading.Lock()

    def record(self, e: str, relations: Iterable[str]) -> None:
        with self._lock:
            self._data[e].update(relations)

    def get(self, e: str) -> tuple[str, ...]:
        with self._lock:
            return tuple(sorted(self._data.get(e, ())))


def flatten_cvt(
    store: GraphStore, e: str, r1: str, cache: FlattenCache | None = None
) -> list[tuple[str, str]]:
    """Expand CVT neighbors of ``(e, r1)`` into ``("r1.r2", terminal)`` pairs.

    Only one level is expanded; a terminal that is itself a CVT is returned
    as-is (callers can detect it with ``store.entity(t).is_cvt``). Edges from
    the CVT back to ``e`` are skipped.
    """
    out: set[tuple[str, str]] = set()
    for x in store.neighbors(e, r1, OUTGOING):
        if not store.entity(x).is_cvt:
            continue
        for r2 in store.relations(x, OUTGOING):
            for t in store.neighbors(x, r2, OUTGOING):
                if t != e:
                    out.add((f"{r1}.{r2}", t))
    result = sorted(out)
    if cache is not None and result:
        cache.record(e, (rel for rel, _ in result))
    return result


def read_lines(path: str | Path) -> list[str]:
    """Non-empty, non-comment lines of a plain list file."""
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
