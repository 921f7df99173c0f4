"""Answer metrics, outcome-based rejection sampling, contamination analysis
and evaluation reports."""

from __future__ import annotations

import json
import re
import string
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, MetricDefinitionError
from .gateway import EmbeddingRequest, Gateway
from .runtime import NO_RESULTS, Trajectory

EM_HIT = "em-hit"
EM_SET = "em-set"
CONVENTIONS = (EM_HIT, EM_SET)
DEFAULT_THRESHOLDS = (0.80, 0.85, 0.90)
EXCLUSION_THRESHOLD = 0.85

_ARTICLES = re.compile(r"^(?:(?:a|an|the)\s+)+")
_ASCII_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace, strip leading articles."""
    s = str(text).lower()
    s = "".join(ch for ch in s if ch not in _ASCII_PUNCT and not unicodedata.category(ch).startswith("P"))
    s = " ".join(s.split())
    return _ARTICLES.sub("", s).strip()


@dataclass(frozen=True)
class AnswerSet:
    raw: tuple[str, ...]
    normalized: frozenset[str]

    @classmethod
    def of(cls, answers: Iterable[str] | "AnswerSet" | None) -> "AnswerSet":
        if isinstance(answers, AnswerSet):
            return answers
        if answers is None:
            answers = ()
        if isinstance(answers, str):
            answers = (answers,)
        raw = tuple(str(a) for a in answers)
        return cls(raw, frozenset(n for n in map(normalize_answer, raw) if n))

    def __len__(self) -> int:
        return len(self.normalized)


def _gold(gold: Iterable[str] | AnswerSet) -> AnswerSet:
    g = AnswerSet.of(gold)
    if not g.normalized:
        raise MetricDefinitionError("gold answer set is empty")
    return g


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ArgumentError(f"unknown EM convention {convention!r}; expected one of {CONVENTIONS}")


def exact_match(pred: Iterable[str] | AnswerSet, gold: Iterable[str] | AnswerSet, convention: str = EM_HIT) -> int:
    """``em-hit``: any normalized overlap; ``em-set``: normalized sets equal."""
    _check_convention(convention)
    g = _gold(gold)
    p = AnswerSet.of(pred)
    if convention == EM_HIT:
        return int(bool(p.normalized & g.normalized))
    return int(p.normalized == g.normalized)


def f1(pred: Iterable[str] | AnswerSet, gold: Iterable[str] | AnswerSet) -> float:
    g = _gold(gold)
    p = AnswerSet.of(pred)
    common = len(p.normalized & g.normalized)
    if not common:
        return 0.0
    precision = common / len(p.normalized)
    recall = common / len(g.normalized)
    return 2 * precision * recall / (precision + recall)


def pass_at_k_exact(c: int, n: int, k: int) -> Fraction:
    """``1 - C(n-c, k) / C(n, k)`` as an exact fraction, via the product form
    ``prod_{i=n-c+1}^{n} (1 - k/i)`` for the ratio."""
    for name, v in (("c", c), ("n", n), ("k", k)):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ArgumentError(f"{name} must be an integer")
    if not 0 <= c <= n:
        raise ArgumentError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ArgumentError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return Fraction(1)
    ratio = Fraction(1)
    for i in range(n - c + 1, n + 1):
        ratio *= Fraction(i - k, i)
    return 1 - ratio


def pass_at_k(c: int, n: int, k: int) -> float:
    return float(pass_at_k_exact(c, n, k))


# ---------------------------------------------------------------------------
# trajectory-level checks
# ---------------------------------------------------------------------------


def observation_text(traj: Trajectory) -> str:
    return "\n".join(traj.observations())


def is_error_observation(obs: str | None) -> bool:
    if obs is None:
        return False
    body = obs.removeprefix("<information>").removesuffix("</information>").strip()
    return body == NO_RESULTS or body.startswith("ERROR:") or body.startswith("PARSE ERROR:")


def _grounded(answer: str, normalized_obs: str) -> bool:
    a = normalize_answer(answer)
    return bool(a) and a in normalized_obs


def gold_of(traj: Trajectory, gold: Iterable[str] | AnswerSet | None = None) -> AnswerSet:
    if gold is None:
        if traj.gold_answers is None:
            raise MetricDefinitionError(f"trajectory {traj.qid!r} has no gold answers")
        gold = traj.gold_answers
    return _gold(gold)


def retrieved(traj: Trajectory, gold: Iterable[str] | AnswerSet | None = None) -> bool:
    g = gold_of(traj, gold)
    obs = normalize_answer(observation_text(traj))
    return any(a in obs for a in g.normalized)


def retrieval_rate(trajs: Sequence[Trajectory], golds: Sequence[Iterable[str]] | None = None) -> float:
    if not trajs:
        raise MetricDefinitionError("retrieval rate of an empty batch")
    hits = sum(retrieved(t, None if golds is None else golds[i]) for i, t in enumerate(trajs))
    return hits / len(trajs)


def has_error_step(traj: Trajectory) -> bool:
    return any(is_error_observation(t.observation) for t in traj.turns)


def trajectory_reward(
    traj: Trajectory, gold: Iterable[str] | AnswerSet | None = None, convention: str = EM_HIT
) -> int:
    g = gold_of(traj, gold)
    if traj.truncated:
        return 0
    return exact_match(traj.final_answers, g, convention)


def recovery_rate(
    trajs: Sequence[Trajectory], golds: Sequence[Iterable[str]] | None = None, convention: str = EM_HIT
) -> float | None:
    """Share of trajectories with an erroneous step that still end correct; ``None`` if none erred."""
    den = num = 0
    for i, t in enumerate(trajs):
        if has_error_step(t):
            den += 1
            num += trajectory_reward(t, None if golds is None else golds[i], convention)
    return num / den if den else None


@dataclass(frozen=True)
class RejectDecision:
    accepted: bool
    reasons: tuple[str, ...] = ()

    @property
    def reason(self) -> str | None:
        return self.reasons[0] if self.reasons else None


def reject_sample(
    traj: Trajectory, gold: Iterable[str] | AnswerSet | None = None, convention: str = EM_HIT
) -> RejectDecision:
    """Accept iff the answer is correct and every predicted answer was observed."""
    g = gold_of(traj, gold)
    if traj.truncated:
        return RejectDecision(False, ("truncated",))
    reasons = []
    if exact_match(traj.final_answers, g, convention) != 1:
        reasons.append("incorrect")
    obs = normalize_answer(observation_text(traj))
    if not traj.final_answers or not all(_grounded(a, obs) for a in traj.final_answers):
        reasons.append("ungrounded")
    return RejectDecision(not reasons, tuple(reasons))


# ---------------------------------------------------------------------------
# contamination
# ---------------------------------------------------------------------------


def max_cosine(synth: np.ndarray, test: np.ndarray) -> np.ndarray:
    """For each row of ``synth``, the largest cosine similarity to any row of ``test``.

    Zero vectors have similarity 0 to everything.
    """
    a = np.asarray(synth, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ArgumentError(f"embedding shapes {a.shape} and {b.shape} are incompatible")
    an = np.linalg.norm(a, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.divide(a, an, out=np.zeros_like(a), where=an > 0)
    b = np.divide(b, bn, out=np.zeros_like(b), where=bn > 0)
    return (a @ b.T).max(axis=1)


def embed_all(gateway: Gateway, texts: Sequence[str], batch_size: int = 64, model: str = "") -> np.ndarray:
    vecs: list[list[float]] = []
    for i in range(0, len(texts), batch_size):
        vecs.extend(gateway.embed(EmbeddingRequest(tuple(texts[i : i + batch_size]), model=model)))
    return np.asarray(vecs, dtype=np.float64)


@dataclass
class ContaminationReport:
    ids: list[str]
    max_similarity: list[float]
    per_benchmark: dict[str, list[float]]
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    exclusion_threshold: float = EXCLUSION_THRESHOLD

    @property
    def total(self) -> int:
        return len(self.ids)

    def flagged(self, threshold: float, benchmark: str | None = None) -> int:
        sims = self.max_similarity if benchmark is None else self.per_benchmark[benchmark]
        return sum(1 for s in sims if s >= threshold)

    def rate(self, threshold: float, benchmark: str | None = None) -> float:
        return self.flagged(threshold, benchmark) / self.total if self.total else 0.0

    @property
    def excluded(self) -> list[str]:
        return [i for i, s in zip(self.ids, self.max_similarity) if s >= self.exclusion_threshold]

    def to_dict(self) -> dict[str, Any]:
        rows = []
        for t in self.thresholds:
            row: dict[str, Any] = {"threshold": t, "overall": {"count": self.flagged(t), "rate": self.rate(t)}}
            for b in self.per_benchmark:
                row[b] = {"count": self.flagged(t, b), "rate": self.rate(t, b)}
            rows.append(row)
        return {
            "total": self.total,
            "thresholds": list(self.thresholds),
            "exclusion_threshold": self.exclusion_threshold,
            "rows": rows,
            "excluded": self.excluded,
            "max_similarity": dict(zip(self.ids, self.max_similarity)),
        }

    def render_table(self) -> str:
        cols = ["Threshold", "Overall", *self.per_benchmark]
        lines = [" | ".join(cols)]
        for t in self.thresholds:
            cells = [f"{t:.2f}", _cell(self.rate(t), self.flagged(t))]
            cells += [_cell(self.rate(t, b), self.flagged(t, b)) for b in self.per_benchmark]
            lines.append(" | ".join(cells))
        return "\n".join(lines)


def _cell(rate: float, count: int) -> str:
    return f"{rate * 100:.2f}% ({count})"


def contamination_check(
    gateway: Gateway,
    synth_questions: Sequence[str] | Mapping[str, str],
    test_questions: Sequence[str] | Mapping[str, Sequence[str]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    *,
    exclusion_threshold: float = EXCLUSION_THRESHOLD,
    batch_size: int = 64,
    model: str = "",
) -> ContaminationReport:
    """Max cosine similarity of each synthetic question to the test questions.

    ``test_questions`` may be a flat list or ``{benchmark: questions}``; the
    overall column takes the max across benchmarks.
    """
    if isinstance(synth_questions, Mapping):
        ids, texts = list(synth_questions), list(synth_questions.values())
    else:
        texts = list(synth_questions)
        ids = [str(i) for i in range(len(texts))]
    benches = dict(test_questions) if isinstance(test_questions, Mapping) else {"test": list(test_questions)}
    if not texts or not any(benches.values()):
        raise ArgumentError("contamination check needs non-empty synthetic and test question lists")
    if not thresholds:
        raise ArgumentError("at least one threshold is required")
    s_emb = embed_all(gateway, texts, batch_size, model)
    per: dict[str, list[float]] = {}
    overall = np.full(len(texts), -np.inf)
    for name, qs in benches.items():
        if not qs:
            continue
        sims = max_cosine(s_emb, embed_all(gateway, list(qs), batch_size, model))
        per[name] = [float(x) for x in sims]
        overall = np.maximum(overall, sims)
    return ContaminationReport(ids, [float(x) for x in overall], per, tuple(thresholds), exclusion_threshold)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    qid: str
    em_hit: int
    em_set: int
    f1: float
    reward: int
    retrieved: bool
    recovered: bool | None
    turns: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    ks: tuple[int, ...] = (1,)
    convention: str = EM_HIT
    aggregates: dict[str, Any] = field(default_factory=dict)

    def compute_aggregates(self) -> dict[str, Any]:
        n = len(self.rows)
        agg: dict[str, Any] = {"n": n, "convention": self.convention}
        if not n:
            return agg
        agg["EM"] = sum(r.em_hit if self.convention == EM_HIT else r.em_set for r in self.rows) / n
        agg["EM_hit"] = sum(r.em_hit for r in self.rows) / n
        agg["EM_set"] = sum(r.em_set for r in self.rows) / n
        agg["F1"] = sum(r.f1 for r in self.rows) / n
        agg["retrieval_rate"] = sum(r.retrieved for r in self.rows) / n
        erred = [r for r in self.rows if r.recovered is not None]
        agg["recovery_rate"] = sum(bool(r.recovered) for r in erred) / len(erred) if erred else None
        groups: dict[str, list[int]] = defaultdict(list)
        for r in self.rows:
            groups[r.qid].append(r.reward)
        for k in self.ks:
            vals = [pass_at_k(sum(g), len(g), k) for g in groups.values() if len(g) >= k]
            agg[f"pass@{k}"] = sum(vals) / len(vals) if vals else None
        return agg

    def to_dict(self) -> dict[str, Any]:
        return {"aggregates": self.aggregates, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(
    trajs: Sequence[Trajectory],
    gold: Mapping[str, Sequence[str]] | None = None,
    *,
    ks: Sequence[int] = (1,),
    convention: str = EM_HIT,
) -> EvalReport:
    """Per-trajectory metrics plus aggregates. Several trajectories sharing a
    ``qid`` are treated as independent runs for Pass@k."""
    _check_convention(convention)
    rows = []
    for t in trajs:
        g = gold_of(t, None if gold is None or t.qid not in gold else gold[t.qid])
        reward = trajectory_reward(t, g, convention)
        em_hit = 0 if t.truncated else exact_match(t.final_answers, g, EM_HIT)
        em_set = 0 if t.truncated else exact_match(t.final_answers, g, EM_SET)
        rows.append(
            EvalRow(
                qid=t.qid,
                em_hit=em_hit,
                em_set=em_set,
                f1=0.0 if t.truncated else f1(t.final_answers, g),
                reward=reward,
                retrieved=retrieved(t, g),
                recovered=bool(reward) if has_error_step(t) else None,
                turns=len(t.turns),
            )
        )
    report = EvalReport(rows, tuple(ks), convention)
    report.aggregates = report.compute_aggregates()
    return report


def split_by_rejection(
    trajs: Iterable[Trajectory], gold: Mapping[str, Sequence[str]] | None = None, convention: str = EM_HIT
) -> tuple[list[Trajectory], list[tuple[Trajectory, RejectDecision]]]:
    accepted, rejected = [], []
    for t in trajs:
        d = reject_sample(t, None if gold is None or t.qid not in gold else gold[t.qid], convention)
        if d.accepted:
            accepted.append(t)
        else:
            rejected.append((t, d))
    return accepted, rejected

