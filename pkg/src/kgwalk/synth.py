"""Trajectory synthesis from sampled paths.

For each path: mask intermediates and ask for a question, score it, replay the
path against the toolbox to get realistic observations, write a rationale for
every action, and assemble the turns into a training trajectory.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .crw import ReasoningPath, canonical_branches
from .errors import AssemblyError, KGWalkError, ScoreParseError, SynthesisError
from .gateway import ChatRequest, Gateway, render_prompt
from .runtime import (
    DEFAULT_OBSERVATION_BUDGET,
    RESERVED_TAGS,
    Action,
    Answer,
    EpisodeState,
    KgQuery,
    Trajectory,
    Turn,
    format_observation,
    trajectory_to_json,
)
from .toolbox import DEFAULT_CAP, DEFAULT_K, Toolbox

QUALITY_THRESHOLD = 9.0
DEFAULT_DISTRACTORS = 3
QUESTION_ATTEMPTS = 3
THOUGHT_ATTEMPTS = 3


# ---------------------------------------------------------------------------
# masking and questions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskedPath:
    text: str
    # intermediate entity id -> placeholder
    placeholders: Mapping[str, str]
    path: ReasoningPath

    def masked_names(self) -> list[str]:
        """Surface forms that must not appear in a generated question."""
        out = []
        for e in self.placeholders:
            for s in (self.path.name(e), e):
                if s and s not in out:
                    out.append(s)
        return out


def mask_path(path: ReasoningPath) -> MaskedPath:
    """Replace intermediate entities by ``entity_1, entity_2, ...`` left to right."""
    placeholders: dict[str, str] = {}
    for e in path.intermediates:
        placeholders[e] = f"entity_{len(placeholders) + 1}"

    def label(e: str) -> str:
        return placeholders.get(e) or path.name(e)

    def chain(branch: Sequence[Any]) -> str:
        parts = [label(branch[0].head)]
        for s in branch:
            parts.append(f"--{s.relation}--> {label(s.tail)}")
        return " ".join(parts)

    branches = canonical_branches(path)
    if path.is_conjunction:
        text = "\n".join(f"Branch {i}: {chain(br)}" for i, br in enumerate(branches, 1))
    else:
        text = chain(branches[0])
    return MaskedPath(text, placeholders, path)


def leaks(question: str, masked: MaskedPath) -> list[str]:
    q = question.casefold()
    return [s for s in masked.masked_names() if s.casefold() in q]


def generate_question(
    gateway: Gateway, masked: MaskedPath, *, attempts: int = QUESTION_ATTEMPTS, model: str = ""
) -> str:
    """One question for the masked path; empty or leaking replies are retried."""
    slots = {"structure": masked.path.structure, "masked_path": masked.text}
    reasons = []
    for _ in range(attempts):
        reply = gateway.chat(ChatRequest(render_prompt("question_gen", slots), "question_gen", model=model, slots=slots))
        question = reply.strip()
        if not question:
            reasons.append("empty")
            continue
        leaked = leaks(question, masked)
        if leaked:
            reasons.append(f"leak:{leaked[0]}")
            continue
        return question
    raise SynthesisError("generation-failed", f"question rejected {attempts} times ({', '.join(reasons)})")


@dataclass(frozen=True)
class QualityScore:
    completeness: int
    relevance: int
    coherence: int
    threshold: float = QUALITY_THRESHOLD

    def __post_init__(self) -> None:
        for name in ("completeness", "relevance", "coherence"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v <= 10:
                raise ScoreParseError(f"{name} score {v!r} outside 0..10")

    @property
    def average(self) -> float:
        return (self.completeness + self.relevance + self.coherence) / 3

    @property
    def passed(self) -> bool:
        # exact comparison: (8, 9, 10) averages to exactly 9
        return Fraction(self.completeness + self.relevance + self.coherence, 3) >= Fraction(self.threshold)

    def to_dict(self) -> dict[str, Any]:
        return {
            "completeness": self.completeness,
            "relevance": self.relevance,
            "coherence": self.coherence,
            "average": self.average,
            "pass": self.passed,
        }


def parse_scores(reply: str, *, json_mode: bool = False) -> tuple[int, int, int]:
    if json_mode:
        try:
            data = json.loads(reply)
            vals = tuple(int(data[k]) for k in ("completeness", "relevance", "coherence"))
        except (ValueError, TypeError, KeyError) as exc:
            raise ScoreParseError(f"scorer reply is not the expected JSON object: {exc}") from None
    else:
        found = re.findall(r"\d+", reply)
        if len(found) < 3:
            raise ScoreParseError(f"expected three integer scores in {reply[:80]!r}")
        vals = tuple(int(x) for x in found[:3])
    if any(not 0 <= v <= 10 for v in vals):
        raise ScoreParseError(f"scores {vals} outside 0..10")
    return vals  # type: ignore[return-value]


def score_question(
    gateway: Gateway,
    question: str,
    path_text: str,
    *,
    threshold: float = QUALITY_THRESHOLD,
    json_mode: bool = False,
    model: str = "",
) -> QualityScore:
    if not question.strip():
        raise SynthesisError("generation-failed", "cannot score an empty question")
    slots = {"question": question, "path": path_text}
    reply = gateway.chat(ChatRequest(render_prompt("quality_score", slots), "quality_score", model=model, slots=slots))
    c, r, h = parse_scores(reply, json_mode=json_mode)
    return QualityScore(c, r, h, threshold)


# ---------------------------------------------------------------------------
# environment feedback
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulatedStep:
    index: int
    action: KgQuery
    observation: str
    candidates: tuple[str, ...]
    ranking: str
    rerank_fallback: bool = False
    # optional preceding get_relations turn
    relation_action: KgQuery | None = None
    relation_observation: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "action": self.action.to_dict(),
            "observation": self.observation,
            "candidates": list(self.candidates),
            "ranking": self.ranking,
            "rerank_fallback": self.rerank_fallback,
        }


def _argument(toolbox: Toolbox, path: ReasoningPath, e: str) -> str:
    """The surface name if it resolves back to ``e``, else the id."""
    name = path.name(e)
    try:
        return name if toolbox.resolve(name) == e else e
    except KGWalkError:
        return e


def simulate_feedback(
    toolbox: Toolbox,
    path: ReasoningPath,
    question: str,
    *,
    k: int = DEFAULT_K,
    cap: int = DEFAULT_CAP,
    distractors: int = DEFAULT_DISTRACTORS,
    budget: int = DEFAULT_OBSERVATION_BUDGET,
    relation_turns: bool = False,
) -> list[SimulatedStep]:
    """Replay every hop: rank the relations at the current entity, then fetch
    triples for the oracle relation plus the best-ranked distractors."""
    store = toolbox.store
    steps: list[SimulatedStep] = []
    hops = [s for br in canonical_branches(path) for s in br]
    for i, (h, r, t) in enumerate(hops):
        if t not in store.neighbors(h, r):
            raise SynthesisError("unfaithful-step", f"edge {h} --{r}--> {t} is not in the store")
        arg = _argument(toolbox, path, h)
        rel = toolbox.get_relations(arg, context_query=question, k=k)
        ranked = rel.relations[: len(rel.relations) - rel.flattened]
        extra = [c for c in ranked if c != r][:distractors]
        action = KgQuery("get_triples", arg, (r, *extra))
        res = toolbox.get_triples(arg, list(action.relations), cap, pin=[(h, r, t)])
        obs = format_observation(res, budget)
        if r not in obs or f", {path.name(t)}]" not in obs:
            raise SynthesisError("unfaithful-step", f"observation for hop {i} misses {r} -> {path.name(t)}")
        rel_action = rel_obs = None
        if relation_turns:
            rel_action = KgQuery("get_relations", arg)
            shown = list(dict.fromkeys([*rel.relations, r]))
            rel_obs = format_observation(shown, budget)
        steps.append(SimulatedStep(i, action, obs, tuple(rel.relations), rel.ranking, rel.rerank_fallback,
                                   rel_action, rel_obs))
    return steps


# ---------------------------------------------------------------------------
# thoughts and assembly
# ---------------------------------------------------------------------------


def _history_text(state: EpisodeState) -> str:
    if not state.history:
        return "(no actions yet)"
    parts = []
    for turn in state.history:
        parts.append(turn.action.payload() if turn.action is not None else (turn.raw or ""))
        if turn.observation is not None:
            parts.append(turn.observation.replace("<information>", "Result:").replace("</information>", "").strip())
    return "\n".join(parts)


def _action_text(action: Action) -> str:
    return action.payload() if isinstance(action, KgQuery) else f"answer {action.payload()}"


def generate_thoughts(
    gateway: Gateway,
    state: EpisodeState,
    action: Action,
    *,
    attempts: int = THOUGHT_ATTEMPTS,
    model: str = "",
) -> str:
    """A rationale for ``action`` given the episode so far."""
    if isinstance(action, Answer):
        seen = "\n".join(t.observation or "" for t in state.history)
        missing = [a for a in action.answers if a not in seen]
        if missing:
            raise SynthesisError("unfaithful-answer", f"answer {missing[0]!r} never observed")
    slots = {"question": state.question, "history": _history_text(state), "action": _action_text(action),
             "step": str(state.turn_index + 1)}
    for _ in range(attempts):
        reply = gateway.chat(ChatRequest(render_prompt("thought_gen", slots), "thought_gen", model=model, slots=slots))
        thought = " ".join(reply.split())
        if thought and not any(tag in thought for tag in RESERVED_TAGS):
            return thought
    raise SynthesisError("thought-invalid", f"no usable rationale after {attempts} attempts")


@dataclass
class SynthRecord:
    index: int
    path: ReasoningPath
    masked: MaskedPath | None = None
    question: str = ""
    quality: QualityScore | None = None
    steps: list[SimulatedStep] = field(default_factory=list)
    thoughts: list[str] = field(default_factory=list)
    trajectory: Trajectory | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def qid(self) -> str:
        return f"gs-{self.index:06d}"

    def planned_actions(self) -> list[tuple[Action, str | None]]:
        out: list[tuple[Action, str | None]] = []
        for s in self.steps:
            if s.relation_action is not None:
                out.append((s.relation_action, s.relation_observation))
            out.append((s.action, s.observation))
        out.append((Answer((self.path.name(self.path.answer),)), None))
        return out


def assemble_trajectory(record: SynthRecord) -> Trajectory:
    plan = record.planned_actions()
    if len(record.thoughts) != len(plan):
        raise AssemblyError(f"{len(record.thoughts)} thoughts for {len(plan)} actions")
    if not record.question:
        raise AssemblyError("record has no question")
    turns = [Turn(th, act, obs) for th, (act, obs) in zip(record.thoughts, plan)]
    answer = plan[-1][0]
    assert isinstance(answer, Answer)
    path = record.path
    return Trajectory(
        question=record.question,
        topic_entities=[path.name(e) for e in path.topic_entities],
        turns=turns,
        final_answers=list(answer.answers),
        gold_answers=list(answer.answers),
        qid=record.qid,
        metadata={
            "source": "synth",
            "structure": path.structure,
            "signature": path.signature,
            "path": path.to_dict(),
            "quality": record.quality.to_dict() if record.quality else None,
            **record.provenance,
        },
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    k: int = DEFAULT_K
    per_relation_cap: int = DEFAULT_CAP
    distractors: int = DEFAULT_DISTRACTORS
    question_attempts: int = QUESTION_ATTEMPTS
    thought_attempts: int = THOUGHT_ATTEMPTS
    quality_threshold: float = QUALITY_THRESHOLD
    score_json: bool = False
    observation_budget: int = DEFAULT_OBSERVATION_BUDGET
    relation_turns: bool = False
    workers: int = 1
    models: Mapping[str, str] = field(default_factory=dict)

    def model(self, purpose: str) -> str:
        return self.models.get(purpose, "")


def synthesize_record(index: int, path: ReasoningPath, toolbox: Toolbox, gateway: Gateway, cfg: SynthConfig) -> SynthRecord:
    """Run all phases for one path; raises :class:`SynthesisError` on rejection."""
    rec = SynthRecord(index, path, provenance={"models": {p: cfg.model(p) for p in sorted(cfg.models)}})
    rec.masked = mask_path(path)
    rec.question = generate_question(gateway, rec.masked, attempts=cfg.question_attempts,
                                     model=cfg.model("question_gen"))
    rec.quality = score_question(gateway, rec.question, rec.masked.text, threshold=cfg.quality_threshold,
                                 json_mode=cfg.score_json, model=cfg.model("quality_score"))
    if not rec.quality.passed:
        raise SynthesisError("quality-below-threshold", f"average {rec.quality.average:.2f}")
    rec.steps = simulate_feedback(toolbox, path, rec.question, k=cfg.k, cap=cfg.per_relation_cap,
                                  distractors=cfg.distractors, budget=cfg.observation_budget,
                                  relation_turns=cfg.relation_turns)
    state = EpisodeState(rec.question, [path.name(e) for e in path.topic_entities])
    for action, obs in rec.planned_actions():
        thought = generate_thoughts(gateway, state, action, attempts=cfg.thought_attempts,
                                    model=cfg.model("thought_gen"))
        rec.thoughts.append(thought)
        state.history.append(Turn(thought, action, obs))
    rec.trajectory = assemble_trajectory(rec)
    return rec


@dataclass
class SynthResult:
    records: list[SynthRecord] = field(default_factory=list)
    rejected: list[dict[str, Any]] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    total: int = 0

    @property
    def emitted(self) -> int:
        return len(self.records)

    @property
    def quarantined(self) -> int:
        return sum(1 for r in self.rejected if r["status"] == "quarantined")

    @property
    def dropped(self) -> int:
        return sum(1 for r in self.rejected if r["status"] == "dropped")

    def trajectories(self) -> list[Trajectory]:
        return [r.trajectory for r in self.records if r.trajectory is not None]


def run_synthesis(
    paths: Iterable[ReasoningPath], toolbox: Toolbox, gateway: Gateway, cfg: SynthConfig | None = None
) -> SynthResult:
    cfg = cfg or SynthConfig()
    paths = list(paths)

    def one(item: tuple[int, ReasoningPath]) -> SynthRecord | dict[str, Any]:
        i, p = item
        try:
            return synthesize_record(i, p, toolbox, gateway, cfg)
        except SynthesisError as exc:
            reason, msg = exc.reason, str(exc)
        except KGWalkError as exc:
            reason, msg = type(exc).__name__, str(exc)
        return {
            "index": i,
            "status": "quarantined" if reason == "score-parse" else "dropped",
            "reason": reason,
            "message": msg,
            "path": p.to_dict(),
        }

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(one, enumerate(paths)))
    else:
        outcomes = [one(x) for x in enumerate(paths)]
    result = SynthResult(total=len(paths))
    for out in outcomes:
        if isinstance(out, SynthRecord):
            result.records.append(out)
            result.counters["emitted"] += 1
        else:
            result.rejected.append(out)
            result.counters[f"{out['status']}:{out['reason']}"] += 1
    return result


def config_hash(data: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_synthesis(result: SynthResult, out_dir: str | Path, cfg: SynthConfig, extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Write ``trajectories.jsonl``, ``quarantine.jsonl`` and ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectories.jsonl", "w", encoding="utf-8") as fh:
        for traj in result.trajectories():
            fh.write(trajectory_to_json(traj) + "\n")
    with open(out / "quarantine.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.rejected:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    cfg_dict = asdict(cfg)
    cfg_dict["models"] = dict(cfg.models)
    manifest = {
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "input": result.total,
        "emitted": result.emitted,
        "dropped": result.dropped,
        "quarantined": result.quarantined,
        "counters": dict(sorted(result.counters.items())),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
