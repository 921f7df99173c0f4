"""Episode engine: tag grammar, turn parsing, tool dispatch and trajectories.

An agent turn is rendered as::

    <think> rationale </think>
    <kg-query> get_triples("entity", ["relation", ...]) </kg-query>

or ``<answer> ["a", "b"] </answer>``. Tool results come back as
``<information> ... </information>``. The same text is sent to policy models,
written to datasets, and segmented into a loss mask.
"""

from __future__ import annotations

import ast
import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

from .errors import (
    AmbiguousTurnError,
    ArgumentError,
    KGWalkError,
    MalformedTurnError,
    SchemaVersionError,
    TurnParseError,
    UnknownToolError,
)
from .gateway import ChatRequest, Gateway, render_prompt
from .toolbox import DEFAULT_CAP, DEFAULT_K, RelationQueryResult, Toolbox, TripleQueryResult

SCHEMA_VERSION = "1"
TOOLS = ("get_relations", "get_triples")
RESERVED_TAGS = tuple(
    f"<{c}{t}>" for t in ("think", "kg-query", "answer", "information") for c in ("", "/")
)
DEFAULT_MAX_TURNS = 10
DEFAULT_OBSERVATION_BUDGET = 4096
ELLIPSIS = " ..."
NO_RESULTS = "(no results)"


def _check_text(value: str, what: str) -> None:
    for tag in RESERVED_TAGS:
        if tag in value:
            raise ArgumentError(f"{what} contains reserved tag {tag}")


# ---------------------------------------------------------------------------
# actions and turns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KgQuery:
    tool: str
    entity: str
    relations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "relations", tuple(self.relations))
        if self.tool not in TOOLS:
            raise ArgumentError(f"unknown tool {self.tool!r}")
        if not isinstance(self.entity, str) or not self.entity.strip():
            raise ArgumentError("tool call needs a non-empty entity")
        if self.tool == "get_relations" and self.relations:
            raise ArgumentError("get_relations takes only an entity")
        if self.tool == "get_triples":
            if not self.relations:
                raise ArgumentError("get_triples needs a non-empty relation list")
            if not all(isinstance(r, str) and r for r in self.relations):
                raise ArgumentError("relations must be non-empty strings")
        _check_text(self.entity, "entity")
        for r in self.relations:
            _check_text(r, "relation")

    def payload(self) -> str:
        ent = json.dumps(self.entity, ensure_ascii=False)
        if self.tool == "get_relations":
            return f"get_relations({ent})"
        return f"get_triples({ent}, {json.dumps(list(self.relations), ensure_ascii=False)})"

    def render(self) -> str:
        return f"<kg-query> {self.payload()} </kg-query>"

    def to_dict(self) -> dict[str, Any]:
        return {"type": "kg_query", "tool": self.tool, "entity": self.entity, "relations": list(self.relations)}


@dataclass(frozen=True)
class Answer:
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise ArgumentError("answer list must be non-empty")
        for a in self.answers:
            if not isinstance(a, str):
                raise ArgumentError("answers must be strings")
            _check_text(a, "answer")

    def payload(self) -> str:
        return json.dumps(list(self.answers), ensure_ascii=False)

    def render(self) -> str:
        return f"<answer> {self.payload()} </answer>"

    def to_dict(self) -> dict[str, Any]:
        return {"type": "answer", "answers": list(self.answers)}


Action = Union[KgQuery, Answer]


def action_from_dict(data: Mapping[str, Any]) -> Action:
    kind = data.get("type")
    if kind == "kg_query":
        return KgQuery(data["tool"], data["entity"], tuple(data.get("relations", ())))
    if kind == "answer":
        return Answer(tuple(data["answers"]))
    raise ArgumentError(f"unknown action type {kind!r}")


@dataclass(frozen=True)
class Turn:
    """One agent turn ``(c_t, a_t, o_t)``.

    ``action`` is ``None`` for a turn whose text could not be parsed; ``raw``
    then keeps the model output and ``observation`` the injected parse error.
    """

    think: str
    action: Action | None
    observation: str | None = None
    raw: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.action, Answer) and self.observation is not None:
            raise ArgumentError("answer turns carry no observation")
        if isinstance(self.action, KgQuery) and self.observation is None:
            raise ArgumentError("query turns need an observation")
        if self.action is None and (self.raw is None or self.observation is None):
            raise ArgumentError("unparsed turns need raw text and an error observation")
        if self.action is not None:
            _check_text(self.think, "think")

    def agent_text(self) -> str:
        """The span the agent produced (a learning target)."""
        if self.action is None:
            return self.raw or ""
        return render_turn(self.think, self.action)

    def to_dict(self) -> dict[str, Any]:
        return {
            "think": self.think,
            "action": None if self.action is None else self.action.to_dict(),
            "observation": self.observation,
            "raw": self.raw,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Turn":
        act = data.get("action")
        return cls(
            think=data.get("think", ""),
            action=None if act is None else action_from_dict(act),
            observation=data.get("observation"),
            raw=data.get("raw"),
        )


def render_turn(think: str, action: Action) -> str:
    return f"<think> {think} </think>\n{action.render()}"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_THINK = re.compile(r"<think>(.*?)</think>", re.S)
_QUERY = re.compile(r"<kg-query>(.*?)</kg-query>", re.S)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.S)
_CALL = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*\((.*)\)\s*$", re.S)


def _literal(text: str) -> Any:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # invalid escapes in model output
            return ast.literal_eval(text)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        s = s[1:-1]
    return s.strip()


def _bare_args(body: str) -> tuple[Any, ...]:
    """Tolerant fallback for ``name(entity, [r1, r2])`` written without valid quoting."""
    head, sep, rest = body.partition(",")
    entity = _unquote(head)
    if not sep:
        return (entity,)
    rest = rest.strip()
    if rest.startswith("[") and rest.endswith("]"):
        rest = rest[1:-1]
    rels = [_unquote(p) for p in rest.split(",")]
    return (entity, [r for r in rels if r and r != "..."])


def _parse_call(payload: str) -> KgQuery:
    m = _CALL.match(payload)
    if not m:
        raise MalformedTurnError(f"kg-query payload is not a tool call: {payload.strip()[:80]!r}")
    name, body = m.group(1), m.group(2)
    if name not in TOOLS:
        raise UnknownToolError(f"unknown tool {name!r}")
    args = _literal(f"({body},)") if body.strip() else ()
    if not isinstance(args, tuple):
        args = _bare_args(body)
    if name == "get_relations":
        if len(args) != 1 or not isinstance(args[0], str):
            raise MalformedTurnError('get_relations takes exactly one entity: get_relations("entity")')
        entity, rels = args[0], ()
    else:
        if len(args) != 2 or not isinstance(args[0], str) or not isinstance(args[1], (list, tuple)):
            raise MalformedTurnError('get_triples takes an entity and a list: get_triples("entity", ["r1", ...])')
        items = [r for r in args[1] if r is not Ellipsis]
        if not all(isinstance(r, str) for r in items):
            raise MalformedTurnError("get_triples relations must be strings")
        entity, rels = args[0], tuple(r.strip() for r in items if r.strip())
    try:
        return KgQuery(name, entity.strip(), rels)
    except ArgumentError as exc:
        raise MalformedTurnError(str(exc)) from None


def _parse_answers(payload: str) -> Answer:
    text = payload.strip()
    items: Any = None
    if text.startswith("["):
        try:
            items = json.loads(text)
        except ValueError:
            items = _literal(text)
    if isinstance(items, (list, tuple)):
        answers = [str(a).strip() for a in items if a is not Ellipsis and a is not None]
    else:
        if text.startswith("[") and text.endswith("]"):
            text = text[1:-1]
        answers = [_unquote(p) for p in text.split(",")]
    answers = [a for a in answers if a]
    try:
        return Answer(tuple(answers))
    except ArgumentError as exc:
        raise MalformedTurnError(f"bad answer payload: {exc}") from None


def parse_turn(text: str | bytes) -> tuple[str, Action]:
    """Split one model turn into ``(think, action)``.

    Raises a :class:`TurnParseError` subclass (``malformed``, ``ambiguous`` or
    ``unknown-tool``) for anything else; never any other exception.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise MalformedTurnError(f"turn must be text, got {type(text).__name__}")
    m = _THINK.search(text)
    think = m.group(1).strip() if m else ""
    rest = _THINK.sub(" ", text)
    queries = _QUERY.findall(rest)
    answers = _ANSWER.findall(rest)
    if queries and answers:
        raise AmbiguousTurnError("turn contains both a kg-query and an answer")
    if len(queries) + len(answers) > 1:
        raise AmbiguousTurnError("turn contains more than one action block")
    if not queries and not answers:
        raise MalformedTurnError("turn contains no <kg-query> or <answer> block")
    action: Action = _parse_call(queries[0]) if queries else _parse_answers(answers[0])
    for tag in RESERVED_TAGS:
        if tag in think:
            raise MalformedTurnError(f"think block contains {tag}")
    return think, action


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def wrap_information(body: str, budget: int = DEFAULT_OBSERVATION_BUDGET) -> str:
    """Wrap ``body`` in information tags, cutting it to ``budget`` UTF-8 bytes."""
    text = f"<information> {body} </information>"
    if len(text.encode("utf-8")) <= budget:
        return text
    overhead = len(f"<information> {ELLIPSIS} </information>".encode("utf-8"))
    room = max(0, budget - overhead)
    cut = body.encode("utf-8")[:room].decode("utf-8", errors="ignore")
    # prefer ending on a whole triple, then on any list separator
    boundary = cut.rfind("], ")
    if boundary > 0:
        cut = cut[: boundary + 1]
    elif (boundary := cut.rfind(", ")) > 0:
        cut = cut[:boundary]
    return f"<information> {cut}{ELLIPSIS} </information>"


def format_observation(
    result: RelationQueryResult | TripleQueryResult | Sequence[str],
    budget: int = DEFAULT_OBSERVATION_BUDGET,
) -> str:
    if isinstance(result, RelationQueryResult):
        items = list(result.relations)
    elif isinstance(result, TripleQueryResult):
        items = [f"[{h}, {r}, {t}]" for h, r, t in result.triples]
    else:
        items = [str(x) for x in result]
    return wrap_information(", ".join(items) if items else NO_RESULTS, budget)


def error_observation(message: str, budget: int = DEFAULT_OBSERVATION_BUDGET) -> str:
    return wrap_information(f"ERROR: {_scrub(message)}", budget)


def parse_error_observation(exc: TurnParseError, budget: int = DEFAULT_OBSERVATION_BUDGET) -> str:
    return wrap_information(f"PARSE ERROR: {exc.code}: {_scrub(str(exc))}", budget)


def _scrub(message: str) -> str:
    for tag in RESERVED_TAGS:
        message = message.replace(tag, tag.replace("<", "&lt;"))
    return message


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Span:
    role: str  # "target" or "context"
    start: int  # UTF-8 byte offsets into Trajectory.text
    end: int


@dataclass
class Trajectory:
    question: str
    topic_entities: list[str]
    turns: list[Turn]
    final_answers: list[str] = field(default_factory=list)
    gold_answers: list[str] | None = None
    truncated: bool = False
    qid: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.topic_entities = list(self.topic_entities)
        self.turns = list(self.turns)
        self.final_answers = list(self.final_answers)
        if self.gold_answers is not None:
            self.gold_answers = list(self.gold_answers)
        answers = [i for i, t in enumerate(self.turns) if isinstance(t.action, Answer)]
        if self.truncated:
            if answers:
                raise ArgumentError("a truncated trajectory cannot contain an answer turn")
            if self.final_answers:
                raise ArgumentError("a truncated trajectory has no final answers")
        elif answers and answers != [len(self.turns) - 1]:
            raise ArgumentError("the answer turn must be the single final turn")

    @property
    def answered(self) -> bool:
        return bool(self.turns) and isinstance(self.turns[-1].action, Answer)

    def observations(self) -> list[str]:
        return [t.observation for t in self.turns if t.observation is not None]

    def segments(self) -> list[tuple[str, str]]:
        out: list[tuple[str, str]] = []
        for turn in self.turns:
            out.append(("target", turn.agent_text()))
            if turn.observation is not None:
                out.append(("context", f"\n{turn.observation}\n"))
        return out

    @property
    def text(self) -> str:
        return "".join(s for _, s in self.segments())

    @property
    def loss_mask(self) -> list[Span]:
        spans, pos = [], 0
        for role, s in self.segments():
            n = len(s.encode("utf-8"))
            spans.append(Span(role, pos, pos + n))
            pos += n
        return spans


def serialize_trajectory(traj: Trajectory) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "qid": traj.qid,
        "question": traj.question,
        "topic_entities": list(traj.topic_entities),
        "turns": [t.to_dict() for t in traj.turns],
        "final_answers": list(traj.final_answers),
        "gold_answers": None if traj.gold_answers is None else list(traj.gold_answers),
        "truncated": traj.truncated,
        "metadata": traj.metadata,
        "text": traj.text,
        "loss_mask": [[s.role, s.start, s.end] for s in traj.loss_mask],
    }


def trajectory_to_json(traj: Trajectory) -> str:
    return json.dumps(serialize_trajectory(traj), ensure_ascii=False, sort_keys=True)


def parse_trajectory(record: Mapping[str, Any] | str) -> Trajectory:
    """Inverse of :func:`serialize_trajectory` (``text``/``loss_mask`` are derived)."""
    if isinstance(record, str):
        record = json.loads(record)
    if not isinstance(record, Mapping):
        raise SchemaVersionError("trajectory record must be a JSON object")
    version = record.get("schema_version")
    if version is None:
        raise SchemaVersionError("trajectory record has no schema_version")
    if str(version) != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported trajectory schema_version {version!r}")
    return Trajectory(
        question=record["question"],
        topic_entities=list(record.get("topic_entities", [])),
        turns=[Turn.from_dict(t) for t in record.get("turns", [])],
        final_answers=list(record.get("final_answers", [])),
        gold_answers=record.get("gold_answers"),
        truncated=bool(record.get("truncated", False)),
        qid=record.get("qid", ""),
        metadata=dict(record.get("metadata", {})),
    )


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuntimeConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    k: int = DEFAULT_K
    per_relation_cap: int = DEFAULT_CAP
    observation_budget: int = DEFAULT_OBSERVATION_BUDGET
    # abort instead of injecting a parse-error observation
    strict: bool = False
    enforce_subset: bool = True
    policy_model: str = ""
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        for name in ("max_turns", "k", "per_relation_cap", "observation_budget", "max_output_tokens"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")


@dataclass
class EpisodeState:
    question: str
    topic_entities: list[str]
    max_turns: int = DEFAULT_MAX_TURNS
    history: list[Turn] = field(default_factory=list)
    seen_relations: dict[str, set[str]] = field(default_factory=dict)

    @property
    def turn_index(self) -> int:
        return len(self.history)

    def messages(self, template_dir: str | None = None) -> list[dict[str, str]]:
        """Chat messages for the policy: prompt, then alternating agent turns and observations."""
        msgs = render_prompt(
            "policy",
            {
                "max_turns": str(self.max_turns),
                "question": self.question,
                "topic_entities": ", ".join(self.topic_entities),
            },
            template_dir,
        )
        for turn in self.history:
            msgs.append({"role": "assistant", "content": turn.agent_text()})
            if turn.observation is not None:
                msgs.append({"role": "user", "content": turn.observation})
        return msgs


def execute_action(toolbox: Toolbox, action: KgQuery, state: EpisodeState, cfg: RuntimeConfig) -> str:
    """Run one tool call and return its observation; tool failures become error observations."""
    try:
        if action.tool == "get_relations":
            res = toolbox.get_relations(action.entity, context_query=state.question, k=cfg.k)
            state.seen_relations.setdefault(res.entity, set()).update(res.relations)
            return format_observation(res, cfg.observation_budget)
        e = toolbox.resolve(action.entity)
        if cfg.enforce_subset:
            seen = state.seen_relations.get(e, set())
            unseen = [r for r in action.relations if r not in seen]
            if unseen:
                return error_observation(
                    f"relations not returned by get_relations for {action.entity}: {', '.join(unseen)}",
                    cfg.observation_budget,
                )
        res = toolbox.get_triples(e, list(action.relations), cfg.per_relation_cap)
        return format_observation(res, cfg.observation_budget)
    except KGWalkError as exc:
        return error_observation(str(exc), cfg.observation_budget)


def run_episode(
    toolbox: Toolbox,
    policy: Gateway,
    question: str,
    topic_entities: Sequence[str],
    cfg: RuntimeConfig | None = None,
    *,
    qid: str = "",
    gold_answers: Sequence[str] | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> Trajectory:
    """Run the think/act/observe loop until an answer or ``cfg.max_turns`` turns."""
    cfg = cfg or RuntimeConfig()
    for ent in topic_entities:
        toolbox.resolve(ent)
    state = EpisodeState(question, list(topic_entities), cfg.max_turns)
    meta: dict[str, Any] = {"source": "rollout", **(metadata or {})}
    answers: list[str] = []
    done = False
    while state.turn_index < cfg.max_turns:
        try:
            reply = policy.chat(
                ChatRequest(state.messages(), "policy", model=cfg.policy_model,
                            max_output_tokens=cfg.max_output_tokens)
            )
        except KGWalkError as exc:
            meta["error"] = f"policy: {exc}"
            done = True
            break
        try:
            think, action = parse_turn(reply)
        except TurnParseError as exc:
            if cfg.strict:
                meta["error"] = f"parse: {exc.code}: {exc}"
                done = True
                break
            m = _THINK.search(reply)
            state.history.append(
                Turn(m.group(1).strip() if m else "", None, parse_error_observation(exc, cfg.observation_budget), reply)
            )
            continue
        if isinstance(action, Answer):
            state.history.append(Turn(think, action))
            answers = list(action.answers)
            done = True
            break
        obs = execute_action(toolbox, action, state, cfg)
        state.history.append(Turn(think, action, obs))
    return Trajectory(
        question=question,
        topic_entities=list(topic_entities),
        turns=state.history,
        final_answers=answers,
        gold_answers=None if gold_answers is None else list(gold_answers),
        truncated=not done,
        qid=qid,
        metadata=meta,
    )
