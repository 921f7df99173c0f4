from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgwalk.bm25 import Bm25Index, bm25_rank, tokenize

from oracles import bm25_reference

RELATIONS = [
    "sports.sports_team.arena_stadium",
    "sports.sports_team.location",
    "sports.sports_championship_event.champion",
    "location.location.containedby",
    "people.person.place_of_birth",
]


def test_tokenize_splits_on_dots_and_underscores():
    assert tokenize("sports.sports_team.Arena_Stadium") == ["sports", "sports", "team", "arena", "stadium"]
    assert tokenize("") == []


def test_matches_reference_scores():
    idx = Bm25Index(RELATIONS)
    query = "home stadium of the sports team"
    ref = bm25_reference([tokenize(r) for r in RELATIONS], tokenize(query))
    assert idx.scores(query) == pytest.approx(ref, abs=1e-12)


def test_ranking_prefers_matching_relation():
    ranked = bm25_rank(RELATIONS, "where was the person born place of birth")
    assert ranked[0] == "people.person.place_of_birth"


def test_ties_break_by_string():
    assert bm25_rank(["b.x", "a.x", "c.x"], "nothing matches") == ["a.x", "b.x", "c.x"]


def test_idf_non_negative_for_common_terms():
    idx = Bm25Index(["a.b", "a.c", "a.d"])
    assert all(v > 0 for v in idx.idf.values())


def test_empty_corpus():
    assert bm25_rank([], "q") == []
    with pytest.raises(ValueError):
        Bm25Index([])


word = st.text(alphabet="abcde", min_size=1, max_size=4)
relation = st.lists(word, min_size=1, max_size=4).map(".".join)


@settings(max_examples=150, deadline=None)
@given(st.lists(relation, min_size=1, max_size=8), st.lists(word, max_size=5))
def test_reference_agreement_property(corpus, query_words):
    query = " ".join(query_words)
    ref = bm25_reference([tokenize(r) for r in corpus], tokenize(query))
    assert Bm25Index(corpus).scores(query) == pytest.approx(ref, abs=1e-9)
    ranked = bm25_rank(corpus, query)
    assert sorted(ranked) == sorted(corpus)
