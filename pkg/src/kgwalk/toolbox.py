"""The agent's two primitive tools: ``get_relations`` and ``get_triples``."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, NamedTuple, Sequence

from .bm25 import Bm25Index
from .errors import ArgumentError, KGWalkError
from .gateway import ChatRequest, Gateway, render_prompt
from .store import INCOMING, OUTGOING, FlattenCache, GraphStore, ResolutionCache, flatten_cvt, resolve_entity

log = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_CAP = 5
DEFAULT_DENY_PREFIXES = ("type.", "common.", "kg.", "freebase.", "user.")


@dataclass(frozen=True)
class RelationFilter:
    """Prefix allow/deny lists. An empty allow list admits everything not denied."""

    allow_prefixes: tuple[str, ...] = ()
    deny_prefixes: tuple[str, ...] = DEFAULT_DENY_PREFIXES

    def allows(self, relation: str) -> bool:
        if any(relation.startswith(p) for p in self.deny_prefixes):
            return False
        return not self.allow_prefixes or any(relation.startswith(p) for p in self.allow_prefixes)

    def apply(self, relations: Iterable[str]) -> list[str]:
        return [r for r in relations if self.allows(r)]


@dataclass
class RelationQueryResult:
    entity: str
    relations: list[str]
    truncated: bool = False
    ranking: str = "unranked"
    # trailing entries of ``relations`` that are flattened CVT relations
    flattened: int = 0
    rerank_fallback: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TripleQueryResult:
    """Triples around one entity.

    ``triples`` holds display-name rows, ``ids`` the same rows as entity ids,
    and ``sources`` the requested relation each row was retrieved through
    (flattened CVT rows carry a two-hop relation label).
    """

    entity: str
    triples: list[tuple[str, str, str]] = field(default_factory=list)
    ids: list[tuple[str, str, str]] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    per_relation_cap: int | None = DEFAULT_CAP
    truncated: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "entity": self.entity,
            "triples": [list(t) for t in self.triples],
            "ids": [list(t) for t in self.ids],
            "sources": list(self.sources),
            "per_relation_cap": self.per_relation_cap,
            "truncated": self.truncated,
        }


class RerankOutcome(NamedTuple):
    relations: list[str]
    fallback: bool


_BULLET = re.compile(r"^\s*(?:\d+\s*[.):-]|[-*•])\s*")


def parse_rerank_reply(text: str, candidates: Sequence[str]) -> list[str]:
    """Relation ids in the order the reply mentions them, restricted to ``candidates``."""
    allowed = set(candidates)
    picked: list[str] = []
    for line in text.splitlines():
        line = _BULLET.sub("", line)
        for part in re.split(r"[,\s]+", line):
            rel = part.strip().strip("\"'`[]()")
            if rel in allowed and rel not in picked:
                picked.append(rel)
    return picked


def rerank_relations(
    gateway: Gateway, question: str, candidates: Sequence[str], k: int = DEFAULT_K, model: str = ""
) -> RerankOutcome:
    """Ask the gateway for the top-``k`` relations.

    ``candidates`` must be in BM25 order: ids the model invents are dropped
    and any shortfall is back-filled from that order. A gateway failure yields
    the BM25 order with ``fallback=True``.
    """
    if not candidates:
        raise ArgumentError("rerank needs at least one candidate")
    if k < 1:
        raise ArgumentError("k must be >= 1")
    want = min(k, len(candidates))
    try:
        messages = render_prompt("rerank", {"question": question, "candidates": "\n".join(candidates), "k": str(want)})
        reply = gateway.chat(ChatRequest(messages, "rerank", model=model,
                                         slots={"question": question, "k": str(want)}))
    except KGWalkError as exc:
        log.warning("rerank failed, falling back to BM25 order: %s", exc)
        return RerankOutcome(list(candidates[:want]), True)
    picked = parse_rerank_reply(reply, candidates)[:want]
    for rel in candidates:
        if len(picked) >= want:
            break
        if rel not in picked:
            picked.append(rel)
    return RerankOutcome(picked, False)


class Toolbox:
    """Tool executor over a :class:`GraphStore`.

    Entity arguments may be names or ids; names go through
    :func:`resolve_entity` with a shared cache. CVT relations discovered by
    ``get_triples`` are remembered and appended to later ``get_relations``
    results for the same entity.
    """

    def __init__(
        self,
        store: GraphStore,
        *,
        k: int = DEFAULT_K,
        per_relation_cap: int | None = DEFAULT_CAP,
        relation_filter: RelationFilter | None = None,
        k1: float = 1.2,
        b: float = 0.75,
        reranker: Gateway | None = None,
        rerank_model: str = "",
    ):
        if k < 1:
            raise ArgumentError("k must be >= 1")
        if per_relation_cap is not None and per_relation_cap < 1:
            raise ArgumentError("per_relation_cap must be >= 1")
        self.store = store
        self.k = k
        self.per_relation_cap = per_relation_cap
        self.relation_filter = relation_filter or RelationFilter()
        self.k1 = k1
        self.b = b
        self.reranker = reranker
        self.rerank_model = rerank_model
        self.resolution_cache = ResolutionCache()
        self.flatten_cache = FlattenCache()

    def resolve(self, entity: str) -> str:
        return resolve_entity(self.store, entity, self.resolution_cache)

    def rank(self, relations: Sequence[str], query: str) -> list[str]:
        if not relations:
            return []
        index = Bm25Index(relations, self.k1, self.b)
        return [index.corpus[i] for i in index.rank(query)]

    def get_relations(
        self, entity: str, context_query: str | None = None, k: int | None = None, *, rerank: bool = True
    ) -> RelationQueryResult:
        k = self.k if k is None else k
        if k < 1:
            raise ArgumentError("k must be >= 1")
        e = self.resolve(entity)
        out, t_out = self.store.query_relations(e, OUTGOING)
        inc, t_in = self.store.query_relations(e, INCOMING)
        merged = self.relation_filter.apply(sorted(set(out) | set(inc)))
        fallback = False
        if context_query:
            ranked = self.rank(merged, context_query)
            ranking = "bm25"
            if rerank and self.reranker is not None and ranked:
                outcome = rerank_relations(self.reranker, context_query, ranked, k, self.rerank_model)
                fallback = outcome.fallback
                if not fallback:
                    ranking = "reranked"
                    ranked = outcome.relations + [r for r in ranked if r not in outcome.relations]
        else:
            ranked = merged
            ranking = "unranked"
        top = ranked[:k]
        extra = [r for r in self.relation_filter.apply(self.flatten_cache.get(e)) if r not in top]
        return RelationQueryResult(
            entity=e,
            relations=top + extra,
            truncated=t_out or t_in or len(ranked) > k,
            ranking=ranking,
            flattened=len(extra),
            rerank_fallback=fallback,
        )

    def _edges_for(self, e: str, r: str) -> tuple[list[tuple[str, str, str]], bool]:
        store = self.store
        edges: list[tuple[str, str, str]] = []
        outs, t1 = store.query_neighbors(e, r, OUTGOING)
        ins, t2 = store.query_neighbors(e, r, INCOMING)
        cvts = []
        for t in outs:
            ent = store.entity(t)
            if ent.is_cvt and store.relations(t, OUTGOING):
                cvts.append(t)
            else:
                edges.append((e, r, t))
        if cvts:
            for rel, term in flatten_cvt(store, e, r, self.flatten_cache):
                edges.append((e, rel, term))
        edges.extend((h, r, e) for h in ins)
        if not outs and not ins and "." in r:
            # A two-hop name surfaced by an earlier flatten: rebuild it from its first hop.
            for r1 in store.relations(e, OUTGOING):
                if r.startswith(r1 + "."):
                    edges.extend((e, rel, t) for rel, t in flatten_cvt(store, e, r1, self.flatten_cache) if rel == r)
        return edges, t1 or t2

    def get_triples(
        self,
        entity: str,
        relations: Sequence[str],
        per_relation_cap: int | None | float = -1,
        *,
        pin: Iterable[tuple[str, str, str]] = (),
    ) -> TripleQueryResult:
        """Triples touching ``entity`` through each requested relation.

        ``per_relation_cap`` defaults to the toolbox setting; ``None`` or
        ``math.inf`` means unlimited. ``pin`` lists id-level edges that must
        survive the cap (used when simulating oracle observations).
        """
        if isinstance(relations, str):
            relations = [relations]
        if not relations:
            raise ArgumentError("get_triples needs a non-empty relation list")
        if per_relation_cap == -1:
            per_relation_cap = self.per_relation_cap
        if per_relation_cap is not None and per_relation_cap != math.inf and per_relation_cap < 1:
            raise ArgumentError("per_relation_cap must be >= 1")
        cap = None if per_relation_cap in (None, math.inf) else int(per_relation_cap)
        e = self.resolve(entity)
        pinned = set(pin)
        result = TripleQueryResult(entity=e, per_relation_cap=cap)
        seen: set[str] = set()
        for r in relations:
            if r in seen:
                continue
            seen.add(r)
            edges, backend_trunc = self._edges_for(e, r)
            edges.sort(key=lambda x: x not in pinned)
            if cap is not None and len(edges) > cap:
                edges = edges[:cap]
                result.truncated = True
            result.truncated = result.truncated or backend_trunc
            for h, rel, t in edges:
                result.ids.append((h, rel, t))
                result.triples.append((self.store.display_name(h), rel, self.store.display_name(t)))
                result.sources.append(r)
        return result
