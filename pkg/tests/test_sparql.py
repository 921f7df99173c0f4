from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from kgwalk.errors import BackendError, TemplateError
from kgwalk.sparql import LIMITS, QUERY_KINDS, SparqlStore, render_sparql
from kgwalk.store import INCOMING, OUTGOING
from kgwalk.toolbox import Toolbox

GOLDEN = Path(__file__).parent / "golden"

# (bindings used for rendering, id written in the golden file -> id bound here)
GOLDEN_CASES = {
    "entity_resolution": ({"name": "Barack Obama"}, None),
    "relations_outgoing": ({"entity": "m.0test"}, ("m.02mjmr", "m.0test")),
    "relations_incoming": ({"entity": "m.0test"}, ("m.02mjmr", "m.0test")),
    "triples_aggregated": ({"entity": "m.0test", "relation": "people.person.place_of_birth"}, ("m.02mjmr", "m.0test")),
    "cvt_relations": ({"entity": "m.0cvt"}, ("<cvt_node_id>", "m.0cvt")),
}


@pytest.mark.parametrize("kind", QUERY_KINDS)
def test_golden_bytes(kind):
    bindings, swap = GOLDEN_CASES[kind]
    expected = (GOLDEN / f"{kind}.rq").read_bytes()
    if swap:
        expected = expected.replace(swap[0].encode(), swap[1].encode())
    assert render_sparql(kind, bindings).encode("utf-8") == expected


def test_limits_in_templates():
    for kind in QUERY_KINDS:
        text = render_sparql(kind, {"name": "x", "entity": "m.1", "relation": "a.b"})
        assert text.rstrip().endswith(f"LIMIT {LIMITS[kind]}")


def test_missing_binding():
    with pytest.raises(TemplateError):
        render_sparql("triples_aggregated", {"entity": "m.1"})


@pytest.mark.parametrize("bad", ["m.1 }", 'm"1', "a;b", "m 1"])
def test_identifier_injection_rejected(bad):
    with pytest.raises(TemplateError):
        render_sparql("relations_outgoing", {"entity": bad})


def test_name_literal_is_escaped():
    q = render_sparql("entity_resolution", {"name": 'He said "hi"\\'})
    assert '"He said \\"hi\\"\\\\"@en' in q


def test_unknown_kind():
    with pytest.raises(TemplateError):
        render_sparql("delete_everything", {})


NS = "http://rdf.freebase.com/ns/"


def _uri(x):
    return {"type": "uri", "value": NS + x}


class FakeEndpoint:
    """Answers the rendered templates from a tiny in-memory graph."""

    def __init__(self, fail_first: int = 0):
        self.fail_first = fail_first
        self.calls = 0
        self.queries: list[str] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        if self.calls <= self.fail_first:
            return httpx.Response(503)
        q = request.content.decode()
        self.queries.append(q)
        rows: list[dict] = []
        if "type.object.name \"Alpha\"@en" in q:
            rows = [{"entity": _uri("m.a"), "type": _uri("t.x")}]
        elif "ns:m.a ?relation ?tail" in q:
            rows = [{"relation": _uri("loc.in")}, {"relation": _uri("loc.has_cvt")}]
        elif "?head ?relation ns:m.a" in q:
            rows = [{"relation": _uri("loc.contains")}]
        elif "ns:m.a ns:loc.in ?tail" in q:
            rows = [{"tail": _uri("m.b"), "preferred_name": {"type": "literal", "value": "Beta"}}]
        elif "ns:m.a ns:loc.has_cvt ?tail" in q:
            rows = [{"tail": _uri("m.c")}]
        elif "ns:m.c ?relation ?tail" in q:
            rows = [{"relation": _uri("cvt.value")}]
        elif "ns:m.c ns:cvt.value ?tail" in q:
            rows = [{"tail": {"type": "literal", "value": "42"}}]
        return httpx.Response(200, json={"results": {"bindings": rows}})


def _store(endpoint, **kw):
    client = httpx.Client(transport=httpx.MockTransport(endpoint))
    return SparqlStore("http://kg.example/sparql", client=client, sleep=lambda s: None, **kw)


def test_sparql_store_round_trip():
    fake = FakeEndpoint()
    store = _store(fake)
    assert [e.id for e in store.find_by_name("Alpha")] == ["m.a"]
    assert store.relations("m.a", OUTGOING) == ("loc.has_cvt", "loc.in")
    assert store.relations("m.a", INCOMING) == ("loc.contains",)
    assert store.neighbors("m.a", "loc.in") == ("m.b",)
    assert store.display_name("m.b") == "Beta"


def test_sparql_store_cvt_uses_cvt_template():
    fake = FakeEndpoint()
    tb = Toolbox(_store(fake))
    res = tb.get_triples("m.a", ["loc.has_cvt"])
    assert ("m.a", "loc.has_cvt.cvt.value", "42") in res.ids
    assert any("LIMIT 50" in q for q in fake.queries)


def test_sparql_store_retries_transient_failures():
    fake = FakeEndpoint(fail_first=2)
    store = _store(fake, retries=2)
    assert store.neighbors("m.a", "loc.in") == ("m.b",)
    assert fake.calls == 3


def test_sparql_store_gives_up():
    store = _store(FakeEndpoint(fail_first=10), retries=1)
    with pytest.raises(BackendError):
        store.relations("m.a", OUTGOING)


def test_sparql_store_client_error_is_not_retried():
    calls = []

    def handler(req):
        calls.append(req)
        return httpx.Response(400, text="bad query")

    with pytest.raises(BackendError):
        _store(handler).relations("m.a", OUTGOING)
    assert len(calls) == 1


def test_sparql_store_malformed_results():
    store = _store(lambda req: httpx.Response(200, content=json.dumps({"oops": 1}).encode()))
    with pytest.raises(BackendError):
        store.relations("m.a", OUTGOING)
