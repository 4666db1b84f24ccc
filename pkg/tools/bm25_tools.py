"""
Okapi BM25 first-stage retrieval over an in-memory inverted index.

Scores use IDF(t) = ln(1 + (N - df + 0.5) / (df + 0.5)) so every contribution is
non-negative and a document with score 0 shares no term with the query.
"""
import re
import json
import math
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Dict, Tuple, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from tools.corpus_tools import Corpus, Query

INDEX_MAGIC = b"RRIX1"
INDEX_VERSION = 1
DEFAULT_K1 = 0.9
DEFAULT_B = 0.4

_TOKEN_RE = re.compile(r"[^\W_]+")


class EmptyCorpusError(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


class RankedList(BaseModel, frozen=True):
    query_id: str
    entries: List[Tuple[str, float]] = Field(default_factory=list, description="(doc_id, score), best first.")

    @model_validator(mode="after")
    def _check_order(self) -> "RankedList":
        doc_ids = [doc_id for doc_id, _ in self.entries]
        if len(set(doc_ids)) != len(doc_ids):
            raise ValueError(f"duplicate doc_id in ranked list for {self.query_id}")
        scores = [score for _, score in self.entries]
        if any(later > earlier for earlier, later in zip(scores, scores[1:])):
            raise ValueError(f"scores not non-increasing for {self.query_id}")
        return self

    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BM25Params:
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B


@dataclass
class InvertedIndex:
    doc_ids: List[str]
    doc_lengths: np.ndarray
    # term -> (doc ordinals ascending, term frequencies)
    postings: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    _ordinals: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ordinals = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def avgdl(self) -> float:
        return float(self.doc_lengths.mean()) if self.num_docs else 0.0

    def document_frequency(self, term: str) -> int:
        posting = self.postings.get(term)
        return 0 if posting is None else int(posting[0].shape[0])

    def ordinal(self, doc_id: str) -> int:
        return self._ordinals[doc_id]

    def idf(self, term: str) -> float:
        df = self.document_frequency(term)
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))

    def total_postings(self) -> int:
        return sum(int(ords.shape[0]) for ords, _ in self.postings.values())


def tokenize(text: str) -> List[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def build_index(corpus: Corpus) -> InvertedIndex:
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot index an empty corpus")
    raw: Dict[str, Tuple[List[int], List[int]]] = {}
    lengths: List[int] = []
    for ordinal, doc in enumerate(corpus):
        tokens = tokenize(doc.text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            ords, tfs = raw.setdefault(term, ([], []))
            ords.append(ordinal)
            tfs.append(tf)
    postings = {
        term: (np.asarray(ords, dtype=np.int64), np.asarray(tfs, dtype=np.int64))
        for term, (ords, tfs) in raw.items()
    }
    index = InvertedIndex(doc_ids=corpus.doc_ids(), doc_lengths=np.asarray(lengths, dtype=np.float64), postings=postings)
    logging.info(f"Built BM25 index: {index.num_docs} docs, {len(postings)} terms, avgdl={index.avgdl:.2f}")
    return index


def _length_norm(index: InvertedIndex, params: BM25Params) -> np.ndarray:
    avgdl = index.avgdl or 1.0
    return params.k1 * (1.0 - params.b + params.b * index.doc_lengths / avgdl)


def bm25_score(index: InvertedIndex, query_tokens: Sequence[str], doc_id: str, params: BM25Params = BM25Params()) -> float:
    ordinal = index.ordinal(doc_id)
    norm = _length_norm(index, params)[ordinal]
    score = 0.0
    for term in query_tokens:
        posting = index.postings.get(term)
        if posting is None:
            continue
        ords, tfs = posting
        hit = np.searchsorted(ords, ordinal)
        if hit >= ords.shape[0] or ords[hit] != ordinal:
            continue
        tf = float(tfs[hit])
        score += index.idf(term) * (tf * (params.k1 + 1.0) / (tf + norm))
    return float(score)


def score_all(index: InvertedIndex, query_tokens: Sequence[str], params: BM25Params = BM25Params()) -> np.ndarray:
    """Exhaustive BM25 scores for every indexed document, in ordinal order."""
    norm = _length_norm(index, params)
    scores = np.zeros(index.num_docs, dtype=np.float64)
    for term in query_tokens:
        posting = index.postings.get(term)
        if posting is None:
            continue
        ords, tfs = posting
        tf = tfs.astype(np.float64)
        scores[ords] += index.idf(term) * (tf * (params.k1 + 1.0) / (tf + norm[ords]))
    return scores


def retrieve_top_k(index: InvertedIndex, query: Query, k: int, params: BM25Params = BM25Params()) -> RankedList:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = score_all(index, tokenize(query.text), params)
    positive = np.flatnonzero(scores > 0.0)
    ranked = sorted(positive.tolist(), key=lambda i: (-scores[i], index.doc_ids[i]))[:k]
    return RankedList(query_id=query.query_id, entries=[(index.doc_ids[i], float(scores[i])) for i in ranked])


def retrieve_all(index: InvertedIndex, queries: Iterable[Query], k: int, params: BM25Params = BM25Params()) -> List[RankedList]:
    return [retrieve_top_k(index, query, k, params) for query in queries]


# --- On-disk format: magic, version byte, UTF-8 JSON payload ---
def save_index(index: InvertedIndex, path: str) -> None:
    payload = {
        "doc_ids": index.doc_ids,
        "doc_lengths": [int(x) for x in index.doc_lengths.tolist()],
        "postings": {
            term: [ords.tolist(), tfs.tolist()]
            for term, (ords, tfs) in sorted(index.postings.items())
        },
    }
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(bytes([INDEX_VERSION]))
        f.write(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def load_index(path: str) -> InvertedIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(INDEX_MAGIC):
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    version = blob[len(INDEX_MAGIC)]
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    payload = json.loads(blob[len(INDEX_MAGIC) + 1:].decode("utf-8"))
    postings = {
        term: (np.asarray(ords, dtype=np.int64), np.asarray(tfs, dtype=np.int64))
        for term, (ords, tfs) in payload["postings"].items()
    }
    return InvertedIndex(
        doc_ids=list(payload["doc_ids"]),
        doc_lengths=np.asarray(payload["doc_lengths"], dtype=np.float64),
        postings=postings,
    )
