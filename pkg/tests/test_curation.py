from __future__ import annotations

import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgwalk.curation import (
    EM_HIT,
    EM_SET,
    contamination_check,
    evaluate,
    exact_match,
    f1,
    max_cosine,
    normalize_answer,
    pass_at_k,
    pass_at_k_exact,
    recovery_rate,
    reject_sample,
    retrieval_rate,
)
from kgwalk.errors import ArgumentError, MetricDefinitionError
from kgwalk.gateway import StubGateway
from kgwalk.runtime import Answer, KgQuery, Trajectory, Turn, error_observation, wrap_information

from oracles import cosine_max_bruteforce, pass_at_k_enumerated


def test_normalize():
    assert normalize_answer("  The  Busch Stadium! ") == "busch stadium"
    assert normalize_answer("«St. Louis»") == "st louis"
    assert normalize_answer("a an the thing") == "thing"


def test_exact_match_conventions():
    assert exact_match(["busch stadium", "x"], ["Busch Stadium"], EM_HIT) == 1
    assert exact_match(["busch stadium", "x"], ["Busch Stadium"], EM_SET) == 0
    assert exact_match(["The Busch Stadium"], ["Busch Stadium"], EM_SET) == 1
    with pytest.raises(MetricDefinitionError):
        exact_match(["x"], [])
    with pytest.raises(ArgumentError):
        exact_match(["x"], ["x"], "fuzzy")


def test_f1():
    assert f1({"a", "b"}, {"b", "c"}) == pytest.approx(0.5, abs=1e-12)
    assert f1([], ["a"]) == 0.0


def test_pass_at_k_values():
    assert pass_at_k_exact(2, 4, 2) == Fraction(5, 6)
    assert pass_at_k_exact(0, 5, 3) == 0
    assert pass_at_k_exact(4, 5, 2) == 1
    for bad in ((3, 2, 1), (1, 4, 0), (1, 4, 5), (True, 4, 1)):
        with pytest.raises(ArgumentError):
            pass_at_k_exact(*bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n), st.integers(1, n))))
def test_pass_at_k_matches_enumeration(cnk):
    c, n, k = cnk
    assert pass_at_k_exact(c, n, k) == pass_at_k_enumerated(c, n, k)


def test_pass_at_1_is_c_over_n():
    rng = random.Random(0)
    for _ in range(50):
        n = rng.randint(1, 200)
        c = rng.randint(0, n)
        assert pass_at_k_exact(c, n, 1) == Fraction(c, n)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcd"), max_size=4), st.lists(st.sampled_from("abcd"), min_size=1, max_size=4))
def test_em_set_implies_em_hit(pred, gold):
    if exact_match(pred, gold, EM_SET):
        assert exact_match(pred, gold, EM_HIT)


def _traj(answers, obs, gold, truncated=False, error=False, qid="q"):
    turns = []
    if error:
        turns.append(Turn("", KgQuery("get_relations", "X"), error_observation("no entity named 'X'")))
    turns.append(Turn("look", KgQuery("get_relations", "A"), wrap_information(obs)))
    if not truncated:
        turns.append(Turn("done", Answer(tuple(answers))))
    return Trajectory("q?", ["A"], turns, [] if truncated else answers, gold, truncated, qid)


def test_reject_sample_reasons():
    assert reject_sample(_traj(["Paris"], "Paris", ["Paris"])).accepted
    assert reject_sample(_traj(["Paris"], "Lyon", ["Paris"])).reasons == ("ungrounded",)
    assert reject_sample(_traj(["Lyon"], "Lyon", ["Paris"])).reasons == ("incorrect",)
    assert reject_sample(_traj(["Lyon"], "Rome", ["Paris"])).reasons == ("incorrect", "ungrounded")
    assert reject_sample(_traj([], "Paris", ["Paris"], truncated=True)).reasons == ("truncated",)


def test_retrieval_and_recovery():
    trajs = [_traj(["Paris"], "Paris", ["Paris"], error=True), _traj(["Rome"], "Rome", ["Paris"], error=True),
             _traj(["Paris"], "Lyon", ["Paris"])]
    assert retrieval_rate(trajs) == pytest.approx(1 / 3)
    assert recovery_rate(trajs) == pytest.approx(0.5)
    assert recovery_rate(trajs[2:]) is None
    with pytest.raises(MetricDefinitionError):
        retrieval_rate([])


def test_evaluate_pass_at_k_groups_by_qid():
    runs = [_traj(["Paris"] if i < 2 else ["Rome"], "Paris", ["Paris"], qid="a") for i in range(4)]
    report = evaluate(runs, ks=(1, 2))
    assert report.aggregates["pass@1"] == pytest.approx(0.5)
    assert report.aggregates["pass@2"] == pytest.approx(5 / 6)
    assert report.aggregates["EM"] == pytest.approx(0.5)


def test_evaluate_uses_external_gold():
    report = evaluate([_traj(["Rome"], "Rome", ["Paris"], qid="a")], {"a": ["Rome"]})
    assert report.aggregates["EM"] == 1.0


def test_max_cosine_against_bruteforce():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 8)), rng.normal(size=(20, 8))
    a[3] = 0.0
    assert np.allclose(max_cosine(a, b), cosine_max_bruteforce(a.tolist(), b.tolist()), atol=1e-12)
    with pytest.raises(ArgumentError):
        max_cosine(a, b[:, :4])


def test_contamination_report():
    synth = {"s1": "Who won the 1946 World Series?", "s2": "Completely unrelated question about lakes"}
    tests = {"cwq": ["Who won the 1946 World Series?"], "webqsp": ["What is the capital of France?"]}
    report = contamination_check(StubGateway(), synth, tests)
    assert report.excluded == ["s1"]
    assert report.flagged(0.80) == report.flagged(0.90) == 1
    assert report.flagged(0.85, "webqsp") == 0
    table = report.render_table()
    assert table.splitlines()[0] == "Threshold | Overall | cwq | webqsp"
    assert "0.85 | 50.00% (1) | 50.00% (1) | 0.00% (0)" in table
    with pytest.raises(ArgumentError):
        contamination_check(StubGateway(), [], ["x"])
