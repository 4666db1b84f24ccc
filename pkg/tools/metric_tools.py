"""
Evaluation arithmetic: NDCG@k over qrels, sentence/corpus BLEU and ROUGE-L for
generated reasons, and two-tailed paired t-tests between systems.
"""
import csv
import json
import math
from collections import Counter
from typing import Dict, List, Optional, Sequence, Iterable, Tuple

import numpy as np
from scipy.special import betainc
from pydantic import BaseModel, Field, model_validator

from tools.corpus_tools import Qrels

SIGNIFICANCE_LEVEL = 0.05


class MetricInputError(ValueError):
    pass


# --- Pydantic Models ---
class MetricReport(BaseModel):
    name: str
    k: Optional[int] = None
    per_query: Dict[str, float] = Field(default_factory=dict)
    mean: float = 0.0

    @model_validator(mode="after")
    def _check_mean(self) -> "MetricReport":
        expected = float(np.mean(list(self.per_query.values()))) if self.per_query else 0.0
        if not math.isclose(self.mean, expected, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(f"mean {self.mean} disagrees with per-query values ({expected})")
        return self

    @classmethod
    def from_values(cls, name: str, per_query: Dict[str, float], k: Optional[int] = None) -> "MetricReport":
        ordered = {qid: float(per_query[qid]) for qid in sorted(per_query)}
        mean = float(np.mean(list(ordered.values()))) if ordered else 0.0
        return cls(name=name, k=k, per_query=ordered, mean=mean)

    @property
    def label(self) -> str:
        return f"{self.name}@{self.k}" if self.k else self.name

    def aligned(self, other: "MetricReport") -> Tuple[List[float], List[float]]:
        shared = sorted(set(self.per_query) & set(other.per_query))
        return [self.per_query[q] for q in shared], [other.per_query[q] for q in shared]

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["query_id", "value"])
            for query_id, value in self.per_query.items():
                writer.writerow([query_id, f"{value:.6f}"])


class TTestResult(BaseModel):
    t_statistic: float
    degrees_of_freedom: int = Field(ge=1)
    p_value: float = Field(ge=0.0, le=1.0)
    significant_at_05: bool

    @model_validator(mode="after")
    def _check_flag(self) -> "TTestResult":
        if self.significant_at_05 != (self.p_value < SIGNIFICANCE_LEVEL):
            raise ValueError("significant_at_05 must equal p_value < 0.05")
        return self


# --- Ranking quality ---
def _dcg(gains: Sequence[int]) -> float:
    return sum((2.0 ** grade - 1.0) / math.log2(position + 2) for position, grade in enumerate(gains))


def ndcg_at_k(ranking: Sequence[str], qrels: Qrels, query_id: str, k: int) -> float:
    if k < 1:
        raise MetricInputError(f"k must be >= 1, got {k}")
    if len(set(ranking)) != len(ranking):
        duplicates = sorted(doc for doc, count in Counter(ranking).items() if count > 1)
        raise MetricInputError(f"duplicate documents in ranking for {query_id}: {duplicates}")
    judged = qrels.grades_for(query_id)
    ideal = sorted((grade for grade in judged.values() if grade > 0), reverse=True)[:k]
    if not ideal:
        return 0.0
    dcg = _dcg([judged.get(doc_id, 0) for doc_id in ranking[:k]])
    return dcg / _dcg(ideal)


def qrels_from_order(orders: Dict[str, Sequence[str]], depth: int = 5) -> Qrels:
    """Graded judgments from reference orders: top doc gets grade depth, then depth-1, ... down to 1."""
    grades = {}
    for query_id, order in orders.items():
        for position, doc_id in enumerate(list(order)[:depth]):
            grades[(query_id, doc_id)] = depth - position
    return Qrels(grades)


def evaluate_run(rankings: Dict[str, Sequence[str]], qrels: Qrels, k: int, name: str = "ndcg") -> MetricReport:
    """NDCG@k over every judged query; judged queries missing from the run score 0."""
    per_query = {qid: ndcg_at_k(list(rankings.get(qid, [])), qrels, qid, k) for qid in qrels.query_ids()}
    return MetricReport.from_values(name, per_query, k=k)


# --- Reason text quality ---
def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_counts(candidate: Sequence[str], reference: Sequence[str], n: int) -> Tuple[int, int]:
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    matched = sum(min(count, ref[gram]) for gram, count in cand.items())
    return matched, sum(cand.values())


def _combine_precisions(matched: Sequence[int], totals: Sequence[int], cand_len: int, ref_len: int) -> float:
    log_sum = 0.0
    for n, (m, t) in enumerate(zip(matched, totals), start=1):
        if n == 1:
            if m == 0:
                return 0.0
            precision = m / t
        else:
            precision = (m + 1.0) / (t + 1.0)
        log_sum += math.log(precision)
    brevity = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return brevity * math.exp(log_sum / len(matched))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU, add-1 smoothing for n >= 2, brevity penalty min(1, e^(1 - r/c))."""
    if not reference:
        raise MetricInputError("reference must be non-empty")
    if not candidate:
        return 0.0
    counts = [_clipped_counts(candidate, reference, n) for n in range(1, max_n + 1)]
    return _combine_precisions([m for m, _ in counts], [t for _, t in counts], len(candidate), len(reference))


def corpus_bleu(pairs: Iterable[Tuple[Sequence[str], Sequence[str]]], max_n: int = 4) -> float:
    matched = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for candidate, reference in pairs:
        if not reference:
            raise MetricInputError("reference must be non-empty")
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, max_n + 1):
            m, t = _clipped_counts(candidate, reference, n)
            matched[n - 1] += m
            totals[n - 1] += t
    if cand_len == 0:
        return 0.0
    return _combine_precisions(matched, totals, cand_len, ref_len)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise MetricInputError("reference must be non-empty")
    if not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


# --- Significance ---
def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    if len(a) != len(b):
        raise MetricInputError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise MetricInputError("paired t-test needs at least 2 pairs")
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    df = n - 1
    if not np.any(diffs):
        return TTestResult(t_statistic=0.0, degrees_of_freedom=df, p_value=1.0, significant_at_05=False)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        # constant non-zero difference: the limit p -> 0
        return TTestResult(t_statistic=math.copysign(math.inf, mean), degrees_of_freedom=df, p_value=0.0, significant_at_05=True)
    t = mean / (sd / math.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    p = min(1.0, max(0.0, p))
    return TTestResult(t_statistic=t, degrees_of_freedom=df, p_value=p, significant_at_05=p < SIGNIFICANCE_LEVEL)


def significance_marker(result: TTestResult) -> str:
    return "*" if result.significant_at_05 else ""


def as_percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


def write_summary_json(reports: Sequence[MetricReport], tests: Dict[str, TTestResult], path: str) -> None:
    summary = {
        "metrics": {
            report.label: {"mean": round(report.mean, 6), "percent": as_percent(report.mean), "queries": len(report.per_query)}
            for report in reports
        },
        "t_tests": {
            label: {
                "t": None if math.isinf(result.t_statistic) else round(result.t_statistic, 6),
                "df": result.degrees_of_freedom,
                "p": round(result.p_value, 6),
                "significant": result.significant_at_05,
            }
            for label, result in sorted(tests.items())
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
