"""Lexical BM25 retrieval over a local JSONL corpus.

Retrieved passages are rendered into a reference block ahead of the
question in analysis prompts. Anything with a ``retrieve(text, k)`` method
can stand in for ``BM25Retriever``.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import MDAgentsError

K1 = 1.5
B = 0.75

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class DuplicateDocId(MDAgentsError):
    pass


@dataclass(frozen=True)
class Passage:
    doc_id: str
    text: str
    score: float


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class CorpusIndex:
    documents: dict[str, str]
    term_freqs: dict[str, Counter]
    doc_freq: dict[str, int]
    doc_len: dict[str, int]
    avg_len: float

    def __len__(self) -> int:
        return len(self.documents)


def index_corpus(docs: Iterable[tuple[str, str]]) -> CorpusIndex:
    documents: dict[str, str] = {}
    for doc_id, text in docs:
        if doc_id in documents:
            raise DuplicateDocId(f"duplicate doc_id {doc_id!r}")
        documents[doc_id] = text
    term_freqs = {d: Counter(tokenize(t)) for d, t in documents.items()}
    doc_freq: Counter = Counter()
    for tf in term_freqs.values():
        doc_freq.update(tf.keys())
    doc_len = {d: sum(tf.values()) for d, tf in term_freqs.items()}
    avg_len = sum(doc_len.values()) / len(doc_len) if doc_len else 0.0
    return CorpusIndex(documents, term_freqs, dict(doc_freq), doc_len, avg_len)


def bm25_score(index: CorpusIndex, doc_id: str, query_terms: Sequence[str]) -> float:
    n = len(index)
    tf = index.term_freqs[doc_id]
    norm = K1 * (1 - B + B * index.doc_len[doc_id] / index.avg_len) if index.avg_len else K1
    score = 0.0
    for term in query_terms:
        f = tf.get(term, 0)
        if not f:
            continue
        df = index.doc_freq[term]
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        score += idf * f * (K1 + 1) / (f + norm)
    return score


def retrieve(index: CorpusIndex, query_text: str, k: int = 3) -> list[Passage]:
    """Top ``k`` documents by BM25, ties broken by ascending doc_id.

    Documents sharing no term with the query are never returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query_text)
    scored = []
    for doc_id in index.documents:
        s = bm25_score(index, doc_id, terms)
        if s > 0:
            scored.append((-s, doc_id))
    scored.sort()
    return [Passage(d, index.documents[d], -neg) for neg, d in scored[:k]]


def augment_prompt(base_prompt: str, passages: Sequence[Passage]) -> str:
    if not passages:
        return base_prompt
    lines = ["Reference material:"]
    lines += [f"[{p.doc_id}] {p.text.strip()}" for p in passages]
    return "\n".join(lines) + "\n\n" + base_prompt


class Retriever(Protocol):
    def retrieve(self, query_text: str, k: int) -> list[Passage]: ...


class BM25Retriever:
    def __init__(self, index: CorpusIndex):
        self.index = index

    def retrieve(self, query_text: str, k: int) -> list[Passage]:
        return retrieve(self.index, query_text, k)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "BM25Retriever":
        return cls(index_corpus(load_corpus(path)))


def load_corpus(path: str | Path) -> list[tuple[str, str]]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append((str(rec["doc_id"]), str(rec["text"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise MDAgentsError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
    return docs
