import random

import pytest

from tools.corpus_tools import (
    Corpus, Document, Qrels, RunEntry, CorpusFormatError, DuplicateDocumentError,
    load_corpus, write_corpus, load_queries, load_qrels, write_qrels, load_run, write_run,
    run_from_ranked_lists, group_run,
)
from tools.bm25_tools import RankedList


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadCorpus:
    def test_three_documents_in_file_order(self, tmp_path):
        path = _write(tmp_path / "c.jsonl", '{"doc_id": "d1", "text": "a"}\n{"doc_id": "d2", "text": "b"}\n{"doc_id": "d3", "text": "c", "title": "t"}\n')
        corpus = load_corpus(path)
        assert len(corpus) == 3
        assert corpus.doc_ids() == ["d1", "d2", "d3"]
        assert corpus.get("d3").title == "t"
        assert "d2" in corpus and "d9" not in corpus

    def test_empty_file_gives_empty_corpus(self, tmp_path):
        assert len(load_corpus(_write(tmp_path / "c.jsonl", ""))) == 0

    def test_blank_lines_are_skipped(self, tmp_path):
        path = _write(tmp_path / "c.jsonl", '\n{"doc_id": "d1", "text": "a"}\n\n')
        assert load_corpus(path).doc_ids() == ["d1"]

    def test_duplicate_doc_id_names_id_and_line(self, tmp_path):
        lines = ['{"doc_id": "d1", "text": "a"}', '{"doc_id": "d2", "text": "b"}',
                 '{"doc_id": "d3", "text": "c"}', '{"doc_id": "d1", "text": "again"}']
        path = _write(tmp_path / "c.jsonl", "\n".join(lines) + "\n")
        with pytest.raises(DuplicateDocumentError, match=r"duplicate doc_id d1 \(line 4\)"):
            load_corpus(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = _write(tmp_path / "c.jsonl", '{"doc_id": "d1", "text": "a"}\n{not json\n')
        with pytest.raises(CorpusFormatError) as excinfo:
            load_corpus(path)
        assert excinfo.value.line_no == 2

    def test_empty_text_rejected(self, tmp_path):
        path = _write(tmp_path / "c.jsonl", '{"doc_id": "d1", "text": "  "}\n')
        with pytest.raises(CorpusFormatError):
            load_corpus(path)

    def test_write_then_load_preserves_documents(self, tmp_path):
        docs = [Document(doc_id="x", text="héllo wörld"), Document(doc_id="y", text="b", title="T")]
        path = str(tmp_path / "c.jsonl")
        write_corpus(Corpus(docs), path)
        assert list(load_corpus(path)) == docs


class TestQueries:
    def test_jsonl_and_tsv(self, tmp_path):
        jsonl = _write(tmp_path / "q.jsonl", '{"query_id": "q1", "text": "solar power"}\n')
        tsv = _write(tmp_path / "q.tsv", "q1\tsolar power\nq2\twind\n")
        assert [q.text for q in load_queries(jsonl)] == ["solar power"]
        assert [q.query_id for q in load_queries(tsv)] == ["q1", "q2"]

    def test_duplicate_query_id(self, tmp_path):
        path = _write(tmp_path / "q.tsv", "q1\ta\nq1\tb\n")
        with pytest.raises(CorpusFormatError, match="duplicate query_id q1"):
            load_queries(path)


class TestQrels:
    def test_single_line(self, tmp_path):
        qrels = load_qrels(_write(tmp_path / "qrels.txt", "q1 0 d9 2\n"))
        assert qrels == Qrels({("q1", "d9"): 2})
        assert qrels.grade("q1", "d9") == 2
        assert qrels.grade("q1", "unjudged") == 0

    @pytest.mark.parametrize("line, message", [
        ("q1 0 d1 x", "non-integer grade"),
        ("q1 0 d1 -1", "negative grade"),
        ("q1 0 d1 16", "exceeds cap"),
        ("q1 0 d1", "expected 'qid 0 docid grade'"),
    ])
    def test_bad_lines(self, tmp_path, line, message):
        path = _write(tmp_path / "qrels.txt", "q1 0 d0 1\n" + line + "\n")
        with pytest.raises(CorpusFormatError, match=message) as excinfo:
            load_qrels(path)
        assert excinfo.value.line_no == 2

    def test_second_grade_for_same_pair(self, tmp_path):
        with pytest.raises(CorpusFormatError, match="second grade"):
            load_qrels(_write(tmp_path / "qrels.txt", "q1 0 d1 1\nq1 0 d1 2\n"))

    def test_write_round_trip(self, tmp_path):
        qrels = Qrels({("q2", "a"): 0, ("q1", "b"): 3, ("q1", "a"): 1})
        path = str(tmp_path / "qrels.txt")
        write_qrels(qrels, path)
        assert load_qrels(path) == qrels
        assert qrels.query_ids() == ["q1", "q2"]


class TestRunFiles:
    def test_random_entries_round_trip(self, tmp_path):
        rng = random.Random(7)
        entries = []
        for q in range(10):
            scores = sorted((round(rng.uniform(-50, 50), 6) for _ in range(10)), reverse=True)
            for rank, score in enumerate(scores, start=1):
                entries.append(RunEntry(query_id=f"q{q}", doc_id=f"d{q}-{rng.randrange(10**6)}-{rank}", rank=rank, score=score, tag="t1"))
        path = str(tmp_path / "run.txt")
        write_run(entries, path)
        assert load_run(path) == entries

    def test_six_decimal_format(self, tmp_path):
        path = str(tmp_path / "run.txt")
        write_run([RunEntry(query_id="q1", doc_id="d1", rank=1, score=1.5, tag="bm25")], path)
        assert open(path, encoding="utf-8").read() == "q1 Q0 d1 1 1.500000 bm25\n"

    def test_rank_zero_rejected(self, tmp_path):
        with pytest.raises(CorpusFormatError, match="1-based"):
            load_run(_write(tmp_path / "run.txt", "q1 Q0 d1 0 1.0 t\n"))

    def test_duplicate_rank_rejected(self, tmp_path):
        with pytest.raises(CorpusFormatError, match="duplicate rank 1"):
            load_run(_write(tmp_path / "run.txt", "q1 Q0 d1 1 1.0 t\nq1 Q0 d2 1 0.5 t\n"))

    def test_duplicate_doc_rejected_with_line(self, tmp_path):
        with pytest.raises(CorpusFormatError, match=r"run.txt:2: duplicate doc_id d1"):
            load_run(_write(tmp_path / "run.txt", "q1 Q0 d1 1 1.0 t\nq1 Q0 d1 2 0.5 t\n"))

    def test_rising_score_rejected_with_line(self, tmp_path):
        with pytest.raises(CorpusFormatError, match=r"run.txt:2: .*non-increasing"):
            load_run(_write(tmp_path / "run.txt", "q1 Q0 d1 1 1.0 t\nq1 Q0 d2 2 3.0 t\n"))

    def test_out_of_order_lines_are_checked_by_rank(self, tmp_path):
        path = _write(tmp_path / "run.txt", "q1 Q0 d3 3 0.1 t\nq1 Q0 d1 1 0.9 t\nq2 Q0 d1 1 5.0 t\nq1 Q0 d2 2 0.5 t\n")
        assert [e.doc_id for e in load_run(path)] == ["d3", "d1", "d1", "d2"]
        with pytest.raises(CorpusFormatError, match=r"run.txt:2: "):
            load_run(_write(tmp_path / "run.txt", "q1 Q0 d3 3 0.1 t\nq1 Q0 d2 2 0.05 t\n"))

    def test_same_doc_in_different_queries(self, tmp_path):
        entries = load_run(_write(tmp_path / "run.txt", "q1 Q0 d1 1 1.0 t\nq2 Q0 d1 1 2.0 t\n"))
        assert [e.query_id for e in entries] == ["q1", "q2"]

    def test_ranked_lists_to_entries_and_back(self):
        lists = [RankedList(query_id="q1", entries=[("b", 2.1234567), ("a", 1.0)]),
                 RankedList(query_id="q2", entries=[("c", 0.5)])]
        entries = run_from_ranked_lists(lists, "tag")
        assert [(e.rank, e.score) for e in entries] == [(1, 2.123457), (2, 1.0), (1, 0.5)]
        assert group_run(reversed(entries)) == {"q1": ["b", "a"], "q2": ["c"]}
