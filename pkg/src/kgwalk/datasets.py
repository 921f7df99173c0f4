"""Bundled fixtures and synthetic graphs for tests and demos."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .store import InMemoryStore, Triple, load_store, load_triples

FIXTURES = ("case_study", "crw_small")


def fixture_path(name: str) -> Path:
    """Filesystem path of a bundled fixture file, e.g. ``case_study.tsv``."""
    p = resources.files("kgwalk").joinpath(f"data/fixtures/{name}")
    return Path(str(p))


def load_fixture(name: str) -> InMemoryStore:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; expected one of {FIXTURES}")
    return load_store(fixture_path(f"{name}.tsv"))


def random_graph(
    n_entities: int = 2000,
    n_relations: int = 6,
    relations_per_entity: int = 3,
    out_degree: tuple[int, int] = (2, 6),
    seed: int = 0,
) -> InMemoryStore:
    """A random multi-relational graph with every entity named ``Entity <i>``.

    Each entity gets ``relations_per_entity`` distinct relations, each linking
    to a uniform number of targets in ``out_degree`` (inclusive).
    """
    rng = np.random.default_rng(seed)
    rels = [f"synthetic.rel_{j}" for j in range(n_relations)]
    records = []
    for i in range(n_entities):
        for j in rng.choice(n_relations, size=min(relations_per_entity, n_relations), replace=False):
            k = int(rng.integers(out_degree[0], out_degree[1] + 1))
            targets = rng.choice(n_entities - 1, size=k, replace=False)
            for t in targets:
                t = int(t) + (t >= i)  # skip self loops
                records.append((f"e.{i}", rels[j], f"e.{t}", f"Entity {i}", f"Entity {t}"))
    return load_triples(records)


def layered_graph(layers: int = 6, width: int = 3, seeds: int = 2) -> list[Triple]:
    """Triples of a small layered route network.

    Seeds ``s0..`` sit in layer 0 and link to two layer-1 stops through each of
    two relations; every later stop links to two stops of the next layer. A
    high fan-out ``route.bus_to`` edge set and an off-predicate relation are
    added so that constraint filtering has something to reject.
    """
    out: list[Triple] = []
    for s in range(seeds):
        out.append(Triple(f"s{s}", "route.connects_to", f"l1_{s % width}"))
        out.append(Triple(f"s{s}", "route.connects_to", f"l1_{(s + 1) % width}"))
        out.append(Triple(f"s{s}", "route.ferry_to", f"l1_{(s + 1) % width}"))
        out.append(Triple(f"s{s}", "route.ferry_to", f"l1_{(s + 2) % width}"))
    for layer in range(1, layers - 1):
        for j in range(width):
            for d in (0, 1):
                out.append(Triple(f"l{layer}_{j}", "route.connects_to", f"l{layer + 1}_{(j + d) % width}"))
    for layer in (1, 2):
        for j in range(width):
            out.append(Triple("s0", "route.bus_to", f"l{layer}_{j}"))
    for layer in range(1, layers):
        for j in range(width):
            out.append(Triple(f"l{layer}_{j}", "location.location.containedby", "region"))
    return out
