import os
import bisect
import json
import logging
from typing import Optional, List, Dict, Any, Iterable, Iterator, Tuple

from pydantic import BaseModel, Field, field_validator

# Grades above this overflow the exponential NDCG gain in practice.
MAX_GRADE = 15
SCORE_DECIMALS = 6


class CorpusFormatError(ValueError):
    """A corpus, query, qrels or run file line could not be parsed."""

    def __init__(self, message: str, line_no: Optional[int] = None, path: Optional[str] = None):
        self.line_no = line_no
        self.path = path
        location = ""
        if path is not None and line_no is not None:
            location = f"{path}:{line_no}: "
        elif line_no is not None:
            location = f"line {line_no}: "
        super().__init__(f"{location}{message}")


class DuplicateDocumentError(CorpusFormatError):
    pass


# --- Pydantic Models ---
class Document(BaseModel, frozen=True):
    doc_id: str = Field(description="Identifier unique within a corpus.")
    text: str = Field(description="UTF-8 passage body.")
    title: Optional[str] = Field(None, description="Optional passage title.")

    @field_validator("doc_id", "text")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value or not value.strip():
            raise ValueError("must be a non-empty string")
        return value


class Query(BaseModel, frozen=True):
    query_id: str
    text: str

    @field_validator("query_id", "text")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value or not value.strip():
            raise ValueError("must be a non-empty string")
        return value


class RunEntry(BaseModel, frozen=True):
    query_id: str
    doc_id: str
    rank: int = Field(ge=1, description="1-based rank within the query.")
    score: float
    tag: str = "reasonrank"


class Corpus:
    """Ordered, immutable collection of documents keyed by doc_id."""

    def __init__(self, documents: Iterable[Document] = ()):
        self._documents: Tuple[Document, ...] = tuple(documents)
        self._by_id: Dict[str, int] = {}
        for position, doc in enumerate(self._documents):
            if doc.doc_id in self._by_id:
                raise DuplicateDocumentError(f"duplicate doc_id {doc.doc_id}")
            self._by_id[doc.doc_id] = position

    def __len__(self) -> int:
        return len(self._documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._documents)

    def __getitem__(self, position: int) -> Document:
        return self._documents[position]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        return self._documents[self._by_id[doc_id]]

    def doc_ids(self) -> List[str]:
        return [doc.doc_id for doc in self._documents]


class Qrels:
    """Graded judgments: (query_id, doc_id) -> non-negative grade."""

    def __init__(self, grades: Optional[Dict[Tuple[str, str], int]] = None):
        self._by_query: Dict[str, Dict[str, int]] = {}
        for (query_id, doc_id), grade in (grades or {}).items():
            if grade < 0 or grade > MAX_GRADE:
                raise CorpusFormatError(f"grade {grade} for ({query_id}, {doc_id}) outside 0..{MAX_GRADE}")
            self._by_query.setdefault(query_id, {})[doc_id] = int(grade)

    def __len__(self) -> int:
        return sum(len(docs) for docs in self._by_query.values())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Qrels) and self._by_query == other._by_query

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._by_query.get(query_id, {}).get(doc_id, 0)

    def grades_for(self, query_id: str) -> Dict[str, int]:
        return dict(self._by_query.get(query_id, {}))

    def query_ids(self) -> List[str]:
        return sorted(self._by_query)

    def items(self) -> Iterator[Tuple[Tuple[str, str], int]]:
        for query_id in sorted(self._by_query):
            for doc_id, grade in sorted(self._by_query[query_id].items()):
                yield (query_id, doc_id), grade


def _iter_lines(path: str) -> Iterator[Tuple[int, str]]:
    """Yield (1-based line number, stripped line) for non-blank lines."""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if line:
                yield line_no, line


# --- Corpus / queries ---
def load_corpus(path: str) -> Corpus:
    documents: List[Document] = []
    seen: Dict[str, int] = {}
    for line_no, line in _iter_lines(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"malformed JSON: {e.msg}", line_no, path) from e
        if not isinstance(record, dict) or "doc_id" not in record or "text" not in record:
            raise CorpusFormatError("expected an object with 'doc_id' and 'text'", line_no, path)
        doc_id = str(record["doc_id"])
        if doc_id in seen:
            raise DuplicateDocumentError(f"duplicate doc_id {doc_id} (line {line_no})")
        try:
            doc = Document(doc_id=doc_id, text=record["text"], title=record.get("title"))
        except ValueError as e:
            raise CorpusFormatError(f"invalid document {doc_id!r}: {e}", line_no, path) from e
        seen[doc_id] = line_no
        documents.append(doc)
    logging.info(f"Loaded {len(documents)} documents from {path}")
    return Corpus(documents)


def write_corpus(corpus: Iterable[Document], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in corpus:
            f.write(json.dumps(doc.model_dump(exclude_none=True), ensure_ascii=False) + "\n")


def load_queries(path: str) -> List[Query]:
    """Load topics from JSONL (query_id, text) or TSV (qid<TAB>text), by extension."""
    queries: List[Query] = []
    seen = set()
    is_tsv = os.path.splitext(path)[1].lower() in (".tsv", ".txt")
    for line_no, line in _iter_lines(path):
        if is_tsv:
            if "\t" not in line:
                raise CorpusFormatError("expected 'qid<TAB>text'", line_no, path)
            query_id, text = (part.strip() for part in line.split("\t", 1))
        else:
            try:
                record = json.loads(line)
                query_id, text = str(record["query_id"]), record["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"malformed query record: {e}", line_no, path) from e
        if query_id in seen:
            raise CorpusFormatError(f"duplicate query_id {query_id}", line_no, path)
        try:
            queries.append(Query(query_id=query_id, text=text))
        except ValueError as e:
            raise CorpusFormatError(f"invalid query {query_id!r}: {e}", line_no, path) from e
        seen.add(query_id)
    logging.info(f"Loaded {len(queries)} queries from {path}")
    return queries


# --- TREC qrels ---
def _parse_int(value: str, what: str, line_no: int, path: str) -> int:
    try:
        return int(value)
    except ValueError as e:
        raise CorpusFormatError(f"non-integer {what} {value!r}", line_no, path) from e


def load_qrels(path: str) -> Qrels:
    grades: Dict[Tuple[str, str], int] = {}
    for line_no, line in _iter_lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise CorpusFormatError(f"expected 'qid 0 docid grade', got {len(parts)} columns", line_no, path)
        query_id, _iteration, doc_id, grade_str = parts
        grade = _parse_int(grade_str, "grade", line_no, path)
        if grade < 0:
            raise CorpusFormatError(f"negative grade {grade}", line_no, path)
        if grade > MAX_GRADE:
            raise CorpusFormatError(f"grade {grade} exceeds cap {MAX_GRADE}", line_no, path)
        if (query_id, doc_id) in grades:
            raise CorpusFormatError(f"second grade for ({query_id}, {doc_id})", line_no, path)
        grades[(query_id, doc_id)] = grade
    return Qrels(grades)


def write_qrels(qrels: Qrels, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (query_id, doc_id), grade in qrels.items():
            f.write(f"{query_id} 0 {doc_id} {grade}\n")


# --- TREC runs ---
def load_run(path: str) -> List[RunEntry]:
    """Parse a TREC run; per query, ranks and doc_ids are unique and scores never rise with rank."""
    entries: List[RunEntry] = []
    ranked: Dict[str, Tuple[List[int], List[float]]] = {}
    docs_seen: Dict[str, set] = {}
    for line_no, line in _iter_lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise CorpusFormatError(f"expected 'qid Q0 docid rank score tag', got {len(parts)} columns", line_no, path)
        query_id, _q0, doc_id, rank_str, score_str, tag = parts
        rank = _parse_int(rank_str, "rank", line_no, path)
        if rank < 1:
            raise CorpusFormatError(f"rank {rank} is not 1-based", line_no, path)
        try:
            score = float(score_str)
        except ValueError as e:
            raise CorpusFormatError(f"non-numeric score {score_str!r}", line_no, path) from e

        docs = docs_seen.setdefault(query_id, set())
        if doc_id in docs:
            raise CorpusFormatError(f"duplicate doc_id {doc_id} for query {query_id}", line_no, path)
        docs.add(doc_id)
        ranks, scores = ranked.setdefault(query_id, ([], []))
        slot = bisect.bisect_left(ranks, rank)
        if slot < len(ranks) and ranks[slot] == rank:
            raise CorpusFormatError(f"duplicate rank {rank} for query {query_id}", line_no, path)
        # Lines may arrive out of rank order; only the neighbours need checking.
        if (slot > 0 and scores[slot - 1] < score) or (slot < len(ranks) and scores[slot] > score):
            raise CorpusFormatError(
                f"score {score_str} at rank {rank} breaks the non-increasing order for query {query_id}",
                line_no, path,
            )
        ranks.insert(slot, rank)
        scores.insert(slot, score)
        entries.append(RunEntry(query_id=query_id, doc_id=doc_id, rank=rank, score=score, tag=tag))
    return entries


def format_run_line(entry: RunEntry) -> str:
    return f"{entry.query_id} Q0 {entry.doc_id} {entry.rank} {entry.score:.{SCORE_DECIMALS}f} {entry.tag}"


def write_run(entries: Iterable[RunEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(format_run_line(entry) + "\n")


def run_from_ranked_lists(ranked_lists: Iterable[Any], tag: str) -> List[RunEntry]:
    """Flatten RankedLists (query_id + [(doc_id, score)]) into run entries."""
    entries: List[RunEntry] = []
    for ranked in ranked_lists:
        for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
            entries.append(RunEntry(
                query_id=ranked.query_id,
                doc_id=doc_id,
                rank=rank,
                score=round(float(score), SCORE_DECIMALS),
                tag=tag,
            ))
    return entries


def group_run(entries: Iterable[RunEntry]) -> Dict[str, List[str]]:
    """query_id -> doc_ids in rank order."""
    grouped: Dict[str, List[RunEntry]] = {}
    for entry in entries:
        grouped.setdefault(entry.query_id, []).append(entry)
    return {qid: [e.doc_id for e in sorted(rows, key=lambda e: e.rank)] for qid, rows in grouped.items()}
