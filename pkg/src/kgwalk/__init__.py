"""Knowledge-graph agent toolkit.

Graph stores and the two agent tools, constrained random-walk path sampling,
trajectory synthesis, the think/act/observe episode runtime, and evaluation.
"""

from .errors import KGWalkError
from .store import Entity, GraphStore, InMemoryStore, Triple, load_store, load_triples, resolve_entity
from .toolbox import RelationQueryResult, Toolbox, TripleQueryResult

__version__ = "0.1.0"

__all__ = [
    "Entity",
    "GraphStore",
    "InMemoryStore",
    "KGWalkError",
    "RelationQueryResult",
    "Toolbox",
    "Triple",
    "TripleQueryResult",
    "load_store",
    "load_triples",
    "resolve_entity",
]
