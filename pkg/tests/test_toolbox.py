from __future__ import annotations

import pytest

from kgwalk.errors import ArgumentError, GatewayError, NotFoundError
from kgwalk.gateway import StubGateway
from kgwalk.store import load_triples
from kgwalk.toolbox import RelationFilter, Toolbox, parse_rerank_reply, rerank_relations

CHAMPION = "sports.sports_championship_event.champion"
VENUE = "sports.sports_team.venue"
FLAT = "sports.sports_team.venue.sports.team_venue_relationship.venue"


def test_get_relations_by_name(case_toolbox):
    res = case_toolbox.get_relations("1946 World Series")
    assert res.entity == "m.0ws1946"
    assert CHAMPION in res.relations
    assert res.ranking == "unranked"
    assert res.relations == sorted(res.relations)


def test_context_query_ranks_with_bm25(case_toolbox):
    res = case_toolbox.get_relations("St. Louis Cardinals", "home stadium arena of the team", k=3)
    assert res.ranking == "bm25"
    assert res.relations[0] == "sports.sports_team.arena_stadium"
    assert len(res.relations) == 3 and res.truncated


def test_deny_prefixes_filter():
    store = load_triples([("m.a", "type.object.type", "m.t", "A"), ("m.a", "x.y", "m.b", "A")])
    assert Toolbox(store).get_relations("A").relations == ["x.y"]
    allow = Toolbox(store, relation_filter=RelationFilter(allow_prefixes=("z.",), deny_prefixes=()))
    assert allow.get_relations("A").relations == []


def test_get_triples_renders_names(case_toolbox):
    res = case_toolbox.get_triples("1946 World Series", [CHAMPION])
    assert ("1946 World Series", CHAMPION, "St. Louis Cardinals") in res.triples
    assert ("m.0ws1946", CHAMPION, "m.0stlcards") in res.ids
    assert res.sources == [CHAMPION] * len(res.triples)


def test_get_triples_includes_incoming(case_toolbox):
    res = case_toolbox.get_triples("St. Louis Cardinals", [CHAMPION], None)
    heads = {h for h, _, _ in res.triples}
    assert {"1942 World Series", "1946 World Series", "2011 World Series"} <= heads


def test_per_relation_cap_and_pin(case_toolbox):
    full = case_toolbox.get_triples("St. Louis Cardinals", [CHAMPION], None)
    assert len(full.triples) > 1
    last = full.ids[-1]
    capped = case_toolbox.get_triples("St. Louis Cardinals", [CHAMPION], 1, pin=[last])
    assert capped.ids == [last] and capped.truncated


def test_cvt_flattened_and_remembered(case_toolbox):
    before = case_toolbox.get_relations("St. Louis Cardinals")
    assert FLAT not in before.relations and before.flattened == 0
    res = case_toolbox.get_triples("St. Louis Cardinals", [VENUE], None)
    assert any(r == FLAT for _, r, _ in res.triples)
    assert all(not t.startswith("m.0cvt") for _, _, t in res.ids)
    after = case_toolbox.get_relations("St. Louis Cardinals")
    assert FLAT in after.relations and after.flattened >= 1
    # a flattened name can be queried directly
    direct = case_toolbox.get_triples("St. Louis Cardinals", [FLAT], None)
    assert {t for _, _, t in direct.triples} >= {"Busch Stadium"}


def test_errors(case_toolbox):
    with pytest.raises(ArgumentError):
        case_toolbox.get_triples("St. Louis Cardinals", [])
    with pytest.raises(ArgumentError):
        case_toolbox.get_relations("St. Louis Cardinals", k=0)
    with pytest.raises(NotFoundError):
        case_toolbox.get_relations("Atlantis")


def test_unknown_relation_gives_empty_result(case_toolbox):
    assert case_toolbox.get_triples("St. Louis Cardinals", ["no.such.relation"]).triples == []


def test_parse_rerank_reply_keeps_only_candidates():
    reply = "1. b.c\n2) made.up\n- a.b, b.c"
    assert parse_rerank_reply(reply, ["a.b", "b.c"]) == ["b.c", "a.b"]


def test_rerank_backfills_from_bm25_order():
    gw = StubGateway({"rerank": "c.c"})
    out = rerank_relations(gw, "q", ["a.a", "b.b", "c.c"], k=2)
    assert out.relations == ["c.c", "a.a"] and not out.fallback


def test_rerank_failure_falls_back(case_store):
    class Broken(StubGateway):
        def _chat(self, req):
            raise GatewayError("down")

    tb = Toolbox(case_store, reranker=Broken())
    res = tb.get_relations("St. Louis Cardinals", "stadium")
    assert res.rerank_fallback and res.ranking == "bm25"


def test_reranked_order_used(case_store):
    tb = Toolbox(case_store, reranker=StubGateway({"rerank": "sports.sports_team.location"}))
    res = tb.get_relations("St. Louis Cardinals", "stadium", k=2)
    assert res.ranking == "reranked"
    assert res.relations[0] == "sports.sports_team.location"
