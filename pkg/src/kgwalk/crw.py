"""Constrained random walks: composition chains (2-5 hops) and 2I conjunctions.

Every transition ``e --r--> e'`` satisfies ``r in predicates`` and
``d_min <= |N(e, r)| <= d_max`` where ``N(e, r)`` is the outgoing neighbor set.
Relations and neighbors are drawn uniformly; walks never revisit an entity.
Each path index gets its own generator seeded from ``(rng_seed, index)`` so a
corpus is a pure function of the store, the config and ``n``.
"""

from __future__ import annotations

import bisect
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, NotFoundError, SampleExhaustedError
from .store import INCOMING, OUTGOING, GraphStore, ResolutionCache, read_lines, resolve_entity

STRUCTURES = ("2hop", "3hop", "4hop", "5hop", "2I")
COMPOSITION_HOPS = {"2hop": 2, "3hop": 3, "4hop": 4, "5hop": 5}

# Structure counts of the 14,855-path reference corpus.
REFERENCE_COUNTS = {"2hop": 1982, "3hop": 4920, "4hop": 1778, "5hop": 576, "2I": 5599}
REFERENCE_MIX = {k: v / sum(REFERENCE_COUNTS.values()) for k, v in REFERENCE_COUNTS.items()}
UNIFORM_MIX = {k: 1.0 / len(STRUCTURES) for k in STRUCTURES}


class Step(NamedTuple):
    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class ReasoningPath:
    """A sampled path. Compositions have one branch; 2I paths have two
    single-hop branches that end at the shared answer."""

    structure: str
    branches: tuple[tuple[Step, ...], ...]
    names: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.structure not in STRUCTURES:
            raise ArgumentError(f"unknown structure {self.structure!r}")
        branches = tuple(tuple(Step(*s) for s in br) for br in self.branches)
        object.__setattr__(self, "branches", branches)
        if not branches or any(not br for br in branches):
            raise ArgumentError("path needs non-empty branches")
        for br in branches:
            for a, b in zip(br, br[1:]):
                if a.tail != b.head:
                    raise ArgumentError(f"steps do not chain: {a} then {b}")
        if self.structure == "2I":
            if len(branches) != 2:
                raise ArgumentError("2I path needs exactly two branches")
            if branches[0][-1].tail != branches[1][-1].tail:
                raise ArgumentError("2I branches must share the answer")
            if branches[0][0].head == branches[1][0].head:
                raise ArgumentError("2I topic entities must differ")
        else:
            if len(branches) != 1 or len(branches[0]) != COMPOSITION_HOPS[self.structure]:
                raise ArgumentError(f"{self.structure} path has the wrong shape")

    @property
    def is_conjunction(self) -> bool:
        return self.structure == "2I"

    @property
    def steps(self) -> tuple[Step, ...]:
        """All steps, branch by branch."""
        return tuple(s for br in self.branches for s in br)

    @property
    def topic_entities(self) -> tuple[str, ...]:
        return tuple(br[0].head for br in self.branches)

    @property
    def answer(self) -> str:
        return self.branches[0][-1].tail

    @property
    def intermediates(self) -> tuple[str, ...]:
        """Non-endpoint entities, in branch-canonical, left-to-right order."""
        out: list[str] = []
        for br in canonical_branches(self):
            for s in br[:-1]:
                if s.tail not in out:
                    out.append(s.tail)
        return tuple(out)

    @property
    def signature(self) -> str:
        return path_signature(self)

    def name(self, e: str) -> str:
        return self.names.get(e) or e

    def to_dict(self) -> dict[str, Any]:
        return {
            "structure": self.structure,
            "branches": [[list(s) for s in br] for br in self.branches],
            "topic_entities": list(self.topic_entities),
            "answer": self.answer,
            "names": dict(sorted(self.names.items())),
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReasoningPath":
        return cls(
            structure=data["structure"],
            branches=tuple(tuple(Step(*s) for s in br) for br in data["branches"]),
            names=dict(data.get("names", {})),
        )


def canonical_branches(path: ReasoningPath) -> list[tuple[Step, ...]]:
    return sorted(path.branches) if path.is_conjunction else list(path.branches)


def path_signature(path: ReasoningPath) -> str:
    """Dedup key: structure plus every (head, relation, tail) of every branch,
    with 2I branches sorted so their order does not matter."""
    body = [[list(s) for s in br] for br in canonical_branches(path)]
    return json.dumps([path.structure, body], ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True)
class WalkConfig:
    predicates: frozenset[str]
    seeds: tuple[str, ...]
    d_min: int = 2
    d_max: int = 40
    structure_mix: Mapping[str, float] = field(default_factory=lambda: dict(REFERENCE_MIX))
    max_attempts_per_path: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "predicates", frozenset(self.predicates))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.predicates:
            raise ArgumentError("predicate set must be non-empty")
        if not self.seeds:
            raise ArgumentError("seed entity list must be non-empty")
        if not (1 <= self.d_min <= self.d_max):
            raise ArgumentError(f"need 1 <= d_min <= d_max, got {self.d_min}, {self.d_max}")
        unknown = set(self.structure_mix) - set(STRUCTURES)
        if unknown:
            raise ArgumentError(f"unknown structures in mix: {sorted(unknown)}")
        if any(v < 0 for v in self.structure_mix.values()):
            raise ArgumentError("structure fractions must be non-negative")
        total = sum(self.structure_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ArgumentError(f"structure mix must sum to 1, got {total!r}")
        if self.max_attempts_per_path < 1:
            raise ArgumentError("max_attempts_per_path must be >= 1")
        if not (0 <= self.rng_seed < 2**64):
            raise ArgumentError("rng_seed must fit in 64 bits")


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for one path slot."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


class WalkSampler:
    """Samples paths from one store under one :class:`WalkConfig`."""

    def __init__(self, store: GraphStore, cfg: WalkConfig):
        self.store = store
        self.cfg = cfg
        self.seeds = tuple(s for s in cfg.seeds if store.has_entity(s))
        if not self.seeds:
            raise ArgumentError("none of the seed entities are in the store")
        self._out: dict[str, tuple[tuple[str, tuple[str, ...]], ...]] = {}
        self._in: dict[str, tuple[tuple[str, tuple[str, ...]], ...]] = {}
        self._names: dict[str, str] = {}
        self._mix_keys = [s for s in STRUCTURES if cfg.structure_mix.get(s, 0.0) > 0]
        self._mix_cdf = list(itertools.accumulate(cfg.structure_mix[s] for s in self._mix_keys))

    def _ok(self, size: int) -> bool:
        return self.cfg.d_min <= size <= self.cfg.d_max

    def admissible_out(self, e: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
        """``(relation, neighbors)`` pairs leaving ``e`` that satisfy the constraint."""
        cached = self._out.get(e)
        if cached is None:
            opts = []
            for r in self.store.relations(e, OUTGOING):
                if r in self.cfg.predicates:
                    ns = self.store.neighbors(e, r, OUTGOING)
                    if self._ok(len(ns)):
                        opts.append((r, ns))
            cached = self._out[e] = tuple(opts)
        return cached

    def admissible_in(self, t: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
        """``(relation, heads)`` pairs entering ``t`` whose head set satisfies the constraint."""
        cached = self._in.get(t)
        if cached is None:
            opts = []
            for r in self.store.relations(t, INCOMING):
                if r in self.cfg.predicates:
                    hs = self.store.neighbors(t, r, INCOMING)
                    if self._ok(len(hs)):
                        opts.append((r, hs))
            cached = self._in[t] = tuple(opts)
        return cached

    def _out_size_ok(self, e: str, r: str) -> bool:
        return any(rel == r for rel, _ in self.admissible_out(e))

    def _name(self, e: str) -> str:
        n = self._names.get(e)
        if n is None:
            n = self._names[e] = self.store.display_name(e)
        return n

    def _path(self, structure: str, branches: tuple[tuple[Step, ...], ...]) -> ReasoningPath:
        ents = {x for br in branches for s in br for x in (s.head, s.tail)}
        return ReasoningPath(structure, branches, {e: self._name(e) for e in sorted(ents)})

    def sample_composition(self, hops: int, rng: np.random.Generator) -> ReasoningPath:
        if hops not in (2, 3, 4, 5):
            raise ArgumentError(f"composition hops must be in 2..5, got {hops}")
        for _ in range(self.cfg.max_attempts_per_path):
            cur = self.seeds[rng.integers(len(self.seeds))]
            visited = {cur}
            steps: list[Step] = []
            for _hop in range(hops):
                options = []
                for r, ns in self.admissible_out(cur):
                    fresh = [n for n in ns if n not in visited]
                    if fresh:
                        options.append((r, fresh))
                if not options:
                    break
                r, fresh = options[rng.integers(len(options))]
                nxt = fresh[rng.integers(len(fresh))]
                steps.append(Step(cur, r, nxt))
                visited.add(nxt)
                cur = nxt
            else:
                return self._path(f"{hops}hop", (tuple(steps),))
        raise SampleExhaustedError(f"no admissible {hops}-hop walk after {self.cfg.max_attempts_per_path} attempts")

    def sample_conjunction(self, rng: np.random.Generator) -> ReasoningPath:
        for _ in range(self.cfg.max_attempts_per_path):
            ea = self.seeds[rng.integers(len(self.seeds))]
            first = [(r, [n for n in ns if n != ea]) for r, ns in self.admissible_out(ea)]
            first = [o for o in first if o[1]]
            if not first:
                continue
            r1, targets = first[rng.integers(len(first))]
            t = targets[rng.integers(len(targets))]
            second = []
            for r2, heads in self.admissible_in(t):
                cands = [h for h in heads if h != ea and h != t and self._out_size_ok(h, r2)]
                if cands:
                    second.append((r2, cands))
            if not second:
                continue
            r2, cands = second[rng.integers(len(second))]
            eb = cands[rng.integers(len(cands))]
            return self._path("2I", ((Step(ea, r1, t),), (Step(eb, r2, t),)))
        raise SampleExhaustedError(f"no convergent 2I structure after {self.cfg.max_attempts_per_path} attempts")

    def sample(self, structure: str, rng: np.random.Generator) -> ReasoningPath:
        if structure == "2I":
            return self.sample_conjunction(rng)
        if structure not in COMPOSITION_HOPS:
            raise ArgumentError(f"unknown structure {structure!r}")
        return self.sample_composition(COMPOSITION_HOPS[structure], rng)

    def draw_structure(self, rng: np.random.Generator) -> str:
        i = bisect.bisect_right(self._mix_cdf, rng.random() * self._mix_cdf[-1])
        return self._mix_keys[min(i, len(self._mix_keys) - 1)]


def sample_composition(store: GraphStore, cfg: WalkConfig, hops: int, rng: np.random.Generator) -> ReasoningPath:
    return WalkSampler(store, cfg).sample_composition(hops, rng)


def sample_conjunction(store: GraphStore, cfg: WalkConfig, rng: np.random.Generator) -> ReasoningPath:
    return WalkSampler(store, cfg).sample_conjunction(rng)


def iter_samples(
    store: GraphStore, cfg: WalkConfig, count: int, sampler: WalkSampler | None = None
) -> Iterator[tuple[str, ReasoningPath | None]]:
    """Draw ``count`` paths (with repeats) following the structure mix.

    Yields ``(structure, path)``; ``path`` is ``None`` when the slot exhausted
    its attempts.
    """
    sampler = sampler or WalkSampler(store, cfg)
    for i in range(count):
        rng = path_rng(cfg.rng_seed, i)
        structure = sampler.draw_structure(rng)
        try:
            yield structure, sampler.sample(structure, rng)
        except SampleExhaustedError:
            yield structure, None


@dataclass
class PathCorpus:
    paths: list[ReasoningPath] = field(default_factory=list)
    rejected: Counter = field(default_factory=Counter)
    exhausted: bool = False

    @property
    def structure_histogram(self) -> dict[str, int]:
        counts = Counter(p.structure for p in self.paths)
        return {s: counts[s] for s in STRUCTURES if counts[s]}

    def fractions(self) -> dict[str, float]:
        n = len(self.paths)
        return {s: c / n for s, c in self.structure_histogram.items()} if n else {}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for p in self.paths)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "PathCorpus":
        paths = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    paths.append(ReasoningPath.from_dict(json.loads(line)))
        return cls(paths)


def sample_corpus(
    store: GraphStore,
    cfg: WalkConfig,
    n: int,
    *,
    duplicate_retries: int = 10,
    slot_factor: int = 5,
) -> PathCorpus:
    """Sample ``n`` signature-unique paths.

    Each slot draws its structure from the mix and keeps that structure across
    up to ``duplicate_retries`` redraws, so duplicates do not skew the mix.
    Gives up after ``n * slot_factor`` slots and flags the corpus exhausted.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    sampler = WalkSampler(store, cfg)
    corpus = PathCorpus()
    seen: set[str] = set()
    for i in range(n * slot_factor):
        if len(corpus.paths) >= n:
            break
        rng = path_rng(cfg.rng_seed, i)
        structure = sampler.draw_structure(rng)
        for _ in range(duplicate_retries):
            try:
                path = sampler.sample(structure, rng)
            except SampleExhaustedError:
                corpus.rejected[f"exhausted:{structure}"] += 1
                break
            sig = path.signature
            if sig in seen:
                corpus.rejected["duplicate"] += 1
                continue
            seen.add(sig)
            corpus.paths.append(path)
            break
    corpus.exhausted = len(corpus.paths) < n
    return corpus


def load_walk_inputs(
    store: GraphStore, predicates_path: str | Path, seeds_path: str | Path
) -> tuple[frozenset[str], tuple[str, ...]]:
    """Read a predicate list and a seed list (ids or names, one per line)."""
    predicates = frozenset(read_lines(predicates_path))
    cache = ResolutionCache()
    seeds: list[str] = []
    for line in read_lines(seeds_path):
        try:
            seeds.append(resolve_entity(store, line, cache))
        except NotFoundError:
            raise NotFoundError(f"seed {line!r} not found in store") from None
    return predicates, tuple(dict.fromkeys(seeds))


def verify_transition(store: GraphStore, cfg: WalkConfig, step: Sequence[str]) -> bool:
    """Re-check one step against the store, independent of the sampler's caches."""
    h, r, t = step
    if r not in cfg.predicates:
        return False
    ns = store.neighbors(h, r, OUTGOING)
    return t in ns and cfg.d_min <= len(ns) <= cfg.d_max
