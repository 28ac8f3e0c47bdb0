"""Okapi BM25 over an in-memory corpus; the learned-weight-free baseline.

Scoring uses k1 = 0.9, b = 0.4 and idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)).
Tokenization here is intentionally independent of the model tokenizer:
lowercase words with punctuation stripped.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

K1 = 0.9
B = 0.4

_WORD = re.compile(r"[a-z0-9]+")


def bm25_tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Bm25Stats:
    k1: float = K1
    b: float = B
    doc_freq: Counter = field(default_factory=Counter)
    term_freq: dict[int, Counter] = field(default_factory=dict)
    doc_len: dict[int, int] = field(default_factory=dict)
    avg_len: float = 0.0

    @classmethod
    def build(cls, docs: Sequence[tuple[int, str]], k1: float = K1, b: float = B) -> "Bm25Stats":
        stats = cls(k1=k1, b=b)
        for doc_id, text in docs:
            tokens = bm25_tokenize(text)
            stats.term_freq[doc_id] = Counter(tokens)
            stats.doc_len[doc_id] = len(tokens)
            for term in set(tokens):
                stats.doc_freq[term] += 1
        if stats.doc_len:
            stats.avg_len = sum(stats.doc_len.values()) / len(stats.doc_len)
        return stats

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        n = len(self.doc_len)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def bm25_score(query_tokens: Sequence[str], doc_id: int, stats: Bm25Stats) -> float:
    if doc_id not in stats.term_freq:
        raise KeyError(f"unknown document id {doc_id}")
    tf = stats.term_freq[doc_id]
    dl = stats.doc_len[doc_id]
    score = 0.0
    for term in query_tokens:
        freq = tf.get(term, 0)
        if freq == 0:
            continue
        denom = freq + stats.k1 * (1.0 - stats.b + stats.b * dl / stats.avg_len)
        score += stats.idf(term) * freq * (stats.k1 + 1.0) / denom
    return score


def bm25_topk(query: str, stats: Bm25Stats, k: int) -> list[tuple[int, float]]:
    """Top-k (id, score) pairs, ties broken by ascending id."""
    tokens = bm25_tokenize(query)
    scored = [(bm25_score(tokens, doc_id, stats), doc_id) for doc_id in stats.doc_len]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [(doc_id, score) for score, doc_id in scored[:k]]
