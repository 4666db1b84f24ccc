"""
Turn teacher responses into rankings with reasons.

Accepted response shape (unknown keys are ignored):
  {"ranking": [3, 1, 2],
   "reasons": {"3": {"direct": "...", "listwise": "..."}, ...},
   "keywords": {"3": ["..."], ...}}
A bare JSON array is read as the ranking. Ranking entries may be integers,
strings such as "[3]" or "3", or objects carrying "id"/"identifier" plus
optional "direct_reason", "listwise_reason" and "keywords".
"""
import re
import json
import logging
from decimal import Decimal, ROUND_HALF_UP
from typing import Optional, List, Dict, Any, Sequence, Iterable, Tuple

from pydantic import BaseModel, Field

from tools.bm25_tools import RankedList
from tools.prompt_tools import PassageWindow

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n(.*?)```", re.DOTALL)
_IDENTIFIER_RE = re.compile(r"^\[?\s*(\d+)\s*\]?$")
_BRACKET_RE = re.compile(r"\[(\d+)\]")
_CHAIN_RE = re.compile(r"\[\d+\](?:\s*>\s*\[\d+\])+")
_decoder = json.JSONDecoder()


class ResponseParseError(ValueError):
    pass


class UnknownDocumentError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


# --- Pydantic Models ---
class DefectFlags(BaseModel):
    duplicates: List[int] = Field(default_factory=list, description="One entry per repeated occurrence.")
    missing: List[int] = Field(default_factory=list)
    out_of_range: List[int] = Field(default_factory=list)
    unreadable: int = Field(0, description="Ranking entries that were not identifiers at all.")

    @property
    def has_defects(self) -> bool:
        return bool(self.duplicates or self.missing or self.out_of_range or self.unreadable)


class ReasonedRanking(BaseModel):
    query_id: str = ""
    order: List[int] = Field(default_factory=list)
    direct_reasons: Dict[int, str] = Field(default_factory=dict)
    listwise_reasons: Dict[int, str] = Field(default_factory=dict)
    keywords: List[str] = Field(default_factory=list)


class ParsedResponse(BaseModel):
    ranking: ReasonedRanking
    defects: DefectFlags


class WindowRanking(BaseModel):
    window: PassageWindow
    order: List[int] = Field(description="Repaired permutation of the window identifiers.")
    ranking: ReasonedRanking
    defects: DefectFlags = Field(default_factory=DefectFlags)


class QueryDefects(BaseModel):
    query_id: str
    windows: int = 0
    duplicate_occurrences: int = 0
    missing_documents: int = 0
    out_of_range: int = 0

    @classmethod
    def from_windows(cls, query_id: str, flags: Iterable[DefectFlags]) -> "QueryDefects":
        flags = list(flags)
        return cls(
            query_id=query_id,
            windows=len(flags),
            duplicate_occurrences=sum(len(f.duplicates) for f in flags),
            missing_documents=sum(len(f.missing) for f in flags),
            out_of_range=sum(len(f.out_of_range) + f.unreadable for f in flags),
        )


class BehaviorStats(BaseModel):
    query_count: int = Field(ge=1)
    duplicate_occurrences: int = Field(ge=0)
    queries_with_missing: int = Field(ge=0)
    missing_documents: int = Field(ge=0)
    duplicate_rate: float
    missing_rate: float
    precision: int = 0


class TeacherOutput(BaseModel):
    """Merged teacher result for one query across all of its windows."""
    query_id: str
    doc_order: List[str]
    direct_reasons: Dict[str, str] = Field(default_factory=dict)
    listwise_reasons: Dict[str, str] = Field(default_factory=dict)
    keywords: List[str] = Field(default_factory=list)
    defects: QueryDefects


# --- JSON extraction ---
def _decoded_values(text: str) -> List[Any]:
    """Every top-level JSON object or array in text, left to right."""
    values = []
    position = 0
    while position < len(text):
        if text[position] not in "{[":
            position += 1
            continue
        try:
            value, end = _decoder.raw_decode(text, position)
        except json.JSONDecodeError:
            position += 1
            continue
        values.append(value)
        position = end
    return values


def _is_ranking_object(value: Any) -> bool:
    return isinstance(value, dict) and isinstance(value.get("ranking", value.get("order")), list)


def _is_identifier_list(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(_as_identifier(v) is not None for v in value)


def _longest_chain(text: str) -> List[int]:
    longest: List[int] = []
    for match in _CHAIN_RE.finditer(text):
        chain = [int(ident) for ident in _BRACKET_RE.findall(match.group(0))]
        if len(chain) > len(longest):
            longest = chain
    return longest


def extract_first_json(text: str) -> Any:
    """The ranking-shaped JSON value in text, tolerating prose and code fences.

    An object with a "ranking"/"order" list wins over everything else; failing
    that, the longest identifier array or "[3] > [1] > [2]" chain. Bracketed
    citations inside prose ("passage [2] is best") lose to either.
    """
    fenced = []
    for block in _FENCE_RE.findall(text):
        try:
            fenced.append(json.loads(block.strip()))
        except json.JSONDecodeError:
            continue
    values = fenced + _decoded_values(text)
    for value in values:
        if _is_ranking_object(value):
            return value

    best: Optional[List[Any]] = None
    for value in values:
        if _is_identifier_list(value) and (best is None or len(value) > len(best)):
            best = value
    chain = _longest_chain(text)
    if len(chain) > (len(best) if best is not None else 0):
        return chain
    if best is not None:
        return best
    if values:
        return values[0]
    raise ResponseParseError(f"no JSON value found in response: {text[:120]!r}")


def _as_identifier(value: Any) -> Optional[int]:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        match = _IDENTIFIER_RE.match(value.strip())
        if match:
            return int(match.group(1))
    if isinstance(value, dict):
        for key in ("id", "identifier", "passage", "passage_id"):
            if key in value:
                return _as_identifier(value[key])
    return None


def _reason_maps(payload: Dict[str, Any], entries: Sequence[Any]) -> Tuple[Dict[int, str], Dict[int, str]]:
    direct: Dict[int, str] = {}
    listwise: Dict[int, str] = {}
    reasons = payload.get("reasons")
    if isinstance(reasons, dict):
        for raw_key, value in reasons.items():
            ident = _as_identifier(raw_key)
            if ident is None:
                continue
            if isinstance(value, dict):
                direct[ident] = str(value.get("direct", value.get("direct_reason", "")) or "")
                listwise[ident] = str(value.get("listwise", value.get("listwise_reason", "")) or "")
            elif isinstance(value, str):
                direct[ident] = value
    for name, target in (("direct_reasons", direct), ("listwise_reasons", listwise)):
        extra = payload.get(name)
        if isinstance(extra, dict):
            for raw_key, value in extra.items():
                ident = _as_identifier(raw_key)
                if ident is not None and isinstance(value, str):
                    target[ident] = value
    for entry in entries:
        if isinstance(entry, dict):
            ident = _as_identifier(entry)
            if ident is None:
                continue
            if "direct_reason" in entry:
                direct[ident] = str(entry["direct_reason"] or "")
            if "listwise_reason" in entry:
                listwise[ident] = str(entry["listwise_reason"] or "")
    return direct, listwise


def _keywords(payload: Dict[str, Any], entries: Sequence[Any]) -> List[str]:
    collected: List[str] = []
    raw = payload.get("keywords")
    if isinstance(raw, dict):
        for key in sorted(raw, key=lambda k: (_as_identifier(k) is None, _as_identifier(k) or 0, str(k))):
            value = raw[key]
            collected.extend(value if isinstance(value, list) else [value])
    elif isinstance(raw, list):
        collected.extend(raw)
    for entry in entries:
        if isinstance(entry, dict) and isinstance(entry.get("keywords"), list):
            collected.extend(entry["keywords"])
    unique: List[str] = []
    for word in collected:
        word = str(word).strip()
        if word and word not in unique:
            unique.append(word)
    return unique


def parse_ranking_response(text: str, expected_ids: Iterable[int], query_id: str = "") -> ParsedResponse:
    expected = set(expected_ids)
    value = extract_first_json(text)
    payload: Dict[str, Any] = value if isinstance(value, dict) else {"ranking": value}
    entries = payload.get("ranking", payload.get("order", []))
    if not isinstance(entries, list):
        entries = []

    order: List[int] = []
    unreadable = 0
    for entry in entries:
        ident = _as_identifier(entry)
        if ident is None:
            unreadable += 1
        else:
            order.append(ident)

    defects = DefectFlags(
        duplicates=_repeats(order),
        missing=sorted(expected - set(order)),
        out_of_range=sorted({ident for ident in order if ident not in expected}),
        unreadable=unreadable,
    )
    direct, listwise = _reason_maps(payload, entries)
    ranking = ReasonedRanking(
        query_id=query_id,
        order=order,
        direct_reasons={ident: direct.get(ident, "") for ident in dict.fromkeys(order)},
        listwise_reasons={ident: listwise.get(ident, "") for ident in dict.fromkeys(order)},
        keywords=_keywords(payload, entries),
    )
    if defects.has_defects:
        logging.warning(
            f"Teacher defects for query {query_id or '?'}: duplicates={defects.duplicates} "
            f"missing={defects.missing} out_of_range={defects.out_of_range} unreadable={unreadable}"
        )
    return ParsedResponse(ranking=ranking, defects=defects)


def _repeats(order: Sequence[int]) -> List[int]:
    """Identifiers of every occurrence after the first."""
    seen = set()
    repeats = []
    for ident in order:
        if ident in seen:
            repeats.append(ident)
        seen.add(ident)
    return repeats


def serialize_ranking(ranking: ReasonedRanking) -> str:
    identifiers = list(dict.fromkeys(ranking.order))
    payload = {
        "ranking": ranking.order,
        "reasons": {
            str(ident): {
                "direct": ranking.direct_reasons.get(ident, ""),
                "listwise": ranking.listwise_reasons.get(ident, ""),
            }
            for ident in identifiers
        },
        "keywords": ranking.keywords,
    }
    return json.dumps(payload, ensure_ascii=False, sort_keys=True)


# --- Repair and merge ---
def repair_order(order: Sequence[int], expected_ids: Iterable[int], fallback_order: Sequence[int]) -> List[int]:
    """First occurrences of valid ids, then missing ids in fallback order."""
    expected = set(expected_ids)
    repaired: List[int] = []
    seen = set()
    for ident in order:
        if ident in expected and ident not in seen:
            repaired.append(ident)
            seen.add(ident)
    repaired.extend(ident for ident in fallback_order if ident in expected and ident not in seen)
    return repaired


def rank_window(window: PassageWindow, response_text: str) -> WindowRanking:
    """Parse and repair one window's response; a response without JSON keeps the window order."""
    identifiers = [p.identifier for p in window.passages]
    try:
        parsed = parse_ranking_response(response_text, identifiers, window.query_id)
    except ResponseParseError as e:
        logging.warning(f"Unreadable teacher response for query {window.query_id}, window at {window.start}: {e}")
        parsed = ParsedResponse(
            ranking=ReasonedRanking(query_id=window.query_id),
            defects=DefectFlags(missing=identifiers, unreadable=1),
        )
    order = repair_order(parsed.ranking.order, identifiers, identifiers)
    ranking = parsed.ranking.model_copy(update={
        "order": order,
        "direct_reasons": {i: parsed.ranking.direct_reasons.get(i, "") for i in order},
        "listwise_reasons": {i: parsed.ranking.listwise_reasons.get(i, "") for i in order},
    })
    return WindowRanking(window=window, order=order, ranking=ranking, defects=parsed.defects)


def apply_window(working: Sequence[str], window_ranking: WindowRanking) -> List[str]:
    """Write the window's permutation into the slots its documents occupy."""
    positions_by_doc = {doc_id: i for i, doc_id in enumerate(working)}
    window_docs = window_ranking.window.doc_ids()
    unknown = [doc_id for doc_id in window_docs if doc_id not in positions_by_doc]
    if unknown:
        raise UnknownDocumentError(f"window for {window_ranking.window.query_id} references unknown documents {unknown}")
    slots = sorted(positions_by_doc[doc_id] for doc_id in window_docs)
    result = list(working)
    for slot, ident in zip(slots, window_ranking.order):
        result[slot] = window_ranking.window.doc_for(ident)
    return result


def merge_windows(window_rankings: Sequence[WindowRanking], full_first_stage: RankedList) -> RankedList:
    working = full_first_stage.doc_ids()
    for window_ranking in window_rankings:
        working = apply_window(working, window_ranking)
    n = len(working)
    return RankedList(query_id=full_first_stage.query_id, entries=[(doc_id, float(n - i)) for i, doc_id in enumerate(working)])


def merge_teacher_output(first_stage: RankedList, window_rankings: Sequence[WindowRanking]) -> TeacherOutput:
    """Final order plus per-document reasons; later windows overwrite earlier reasons."""
    merged = merge_windows(window_rankings, first_stage)
    direct: Dict[str, str] = {}
    listwise: Dict[str, str] = {}
    keywords: List[str] = []
    for window_ranking in window_rankings:
        for ident in window_ranking.order:
            doc_id = window_ranking.window.doc_for(ident)
            text = window_ranking.ranking.direct_reasons.get(ident, "")
            if text or doc_id not in direct:
                direct[doc_id] = text
            text = window_ranking.ranking.listwise_reasons.get(ident, "")
            if text or doc_id not in listwise:
                listwise[doc_id] = text
        keywords.extend(k for k in window_ranking.ranking.keywords if k not in keywords)
    return TeacherOutput(
        query_id=first_stage.query_id,
        doc_order=merged.doc_ids(),
        direct_reasons={doc_id: direct.get(doc_id, "") for doc_id in merged.doc_ids()},
        listwise_reasons={doc_id: listwise.get(doc_id, "") for doc_id in merged.doc_ids()},
        keywords=keywords,
        defects=QueryDefects.from_windows(first_stage.query_id, (w.defects for w in window_rankings)),
    )


# --- Behavior statistics ---
def _rate(count: int, total: int, precision: int) -> float:
    quantum = Decimal(1).scaleb(-precision)
    return float((Decimal(100 * count) / Decimal(total)).quantize(quantum, rounding=ROUND_HALF_UP))


def analyze_behavior(batch: Sequence[QueryDefects], precision: int = 0) -> BehaviorStats:
    if not batch:
        raise EmptyBatchError("behavior analysis needs at least one query")
    duplicates = sum(q.duplicate_occurrences for q in batch)
    affected = sum(1 for q in batch if q.missing_documents > 0)
    return BehaviorStats(
        query_count=len(batch),
        duplicate_occurrences=duplicates,
        queries_with_missing=affected,
        missing_documents=sum(q.missing_documents for q in batch),
        duplicate_rate=_rate(duplicates, len(batch), precision),
        missing_rate=_rate(affected, len(batch), precision),
        precision=precision,
    )


def defect_records(outputs: Iterable[TeacherOutput]) -> List[Dict[str, Any]]:
    records = []
    for output in outputs:
        d = output.defects
        for defect, count in (("duplicate", d.duplicate_occurrences), ("missing", d.missing_documents), ("out_of_range", d.out_of_range)):
            if count:
                records.append({"query_id": output.query_id, "defect": defect, "detail": f"{count} occurrence(s) over {d.windows} window(s)"})
    return records


def write_defect_log(records: Iterable[Dict[str, Any]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def write_behavior_report(stats_by_mode: Dict[str, BehaviorStats], path: str) -> None:
    report = {
        mode: {
            "queries": stats.query_count,
            "repetition": {"duplicate_identifiers": stats.duplicate_occurrences, "rate_percent": stats.duplicate_rate},
            "missing_documents": {
                "queries_affected": stats.queries_with_missing,
                "documents": stats.missing_documents,
                "rate_percent": stats.missing_rate,
            },
        }
        for mode, stats in sorted(stats_by_mode.items())
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
