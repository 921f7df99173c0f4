"""Okapi BM25 over short candidate strings (relation ids)."""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Sequence

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit.

    Relation ids break apart on ``.`` and ``_``:
    ``sports.sports_team.arena_stadium`` -> ``sports sports team arena stadium``.
    """
    return _TOKEN.findall(text.lower())


class Bm25Index:
    """BM25 index over a fixed corpus of candidate strings.

    Uses the non-negative idf ``ln(1 + (N - n + 0.5) / (n + 0.5))`` so that
    terms shared by half the corpus still contribute.
    """

    def __init__(self, corpus: Sequence[str], k1: float = 1.2, b: float = 0.75):
        if not corpus:
            raise ValueError("BM25 corpus must be non-empty")
        self.corpus = list(corpus)
        self.k1 = k1
        self.b = b
        self.docs = [Counter(tokenize(d)) for d in self.corpus]
        self.lengths = [sum(c.values()) for c in self.docs]
        self.avgdl = sum(self.lengths) / len(self.docs)
        df: Counter[str] = Counter()
        for c in self.docs:
            df.update(c.keys())
        self.df = dict(df)
        n = len(self.docs)
        self.idf = {t: math.log(1.0 + (n - f + 0.5) / (f + 0.5)) for t, f in df.items()}

    def score(self, query: str, i: int) -> float:
        doc = self.docs[i]
        norm = self.k1 * (1.0 - self.b + self.b * self.lengths[i] / self.avgdl) if self.avgdl else self.k1
        s = 0.0
        for term in tokenize(query):
            f = doc.get(term, 0)
            if f:
                s += self.idf[term] * f * (self.k1 + 1.0) / (f + norm)
        return s

    def scores(self, query: str) -> list[float]:
        return [self.score(query, i) for i in range(len(self.docs))]

    def rank(self, query: str) -> list[int]:
        """Corpus indices by descending score; ties by candidate string, then index."""
        sc = self.scores(query)
        return sorted(range(len(sc)), key=lambda i: (-sc[i], self.corpus[i], i))


def bm25_score(index: Bm25Index, query: str, i: int) -> float:
    return index.score(query, i)


def bm25_rank(candidates: Sequence[str], query: str, k1: float = 1.2, b: float = 0.75) -> list[str]:
    if not candidates:
        return []
    index = Bm25Index(candidates, k1, b)
    return [index.corpus[i] for i in index.rank(query)]
