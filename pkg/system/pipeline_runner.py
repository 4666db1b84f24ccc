"""
Stage orchestration for one run directory:

  index -> retrieve -> teacher-rerank (per mode) -> parse -> train -> student-rerank
        -> evaluate, plus cost-report and behavior-report.

Every stage is fingerprinted (config slice + content hashes of its inputs) in
the run manifest. A stage whose fingerprint and outputs are unchanged is skipped,
so a repeated run issues no teacher requests and rewrites nothing.
"""
import os
import json
import shutil
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Any, List, Optional, Callable, Tuple

import numpy as np
from tqdm import tqdm

from tools.corpus_tools import (
    Corpus, Query, Qrels, load_corpus, load_queries, load_qrels, load_run, write_run, run_from_ranked_lists,
)
from tools.bm25_tools import BM25Params, RankedList, build_index, save_index, load_index, retrieve_all, tokenize
from tools.prompt_tools import PromptMode, PassageWindow, build_prompt, make_window, window_spans
from tools.teacher_tools import (
    CompletionRequest, CostProfile, HttpTransport, Pricing, ResponseCache, TeacherGateway, UsageRecord,
    estimate_cost, profile_cost, round_cost,
)
from tools.mock_tools import MockTransport
from tools.response_tools import (
    TeacherOutput, WindowRanking, analyze_behavior, apply_window, defect_records, merge_teacher_output,
    rank_window, write_behavior_report, write_defect_log,
)
from tools.metric_tools import (
    MetricReport, TTestResult, bleu, corpus_bleu, evaluate_run, paired_t_test, rouge_l, significance_marker,
    as_percent, write_summary_json,
)
from tools.student_tools import (
    FeatureExtractor, GenerationVocab, StudentShapeError, build_examples, load_params, reason_texts, rerank_student,
    save_params, subsample_examples, train, write_loss_trace,
)
from system.config_validator import ConfigError, RunConfig
from system.state_manager import StateManager, StageRecord, canonical_hash, hash_file

INDEX_FILE = "index.rrix"
RETRIEVE_RUN = "retrieve.run"
MODEL_FILE = "model.json"
LOSS_TRACE = "loss_trace.csv"
STUDENT_RUN = "student.run"
STUDENT_REASONS = "student_reasons.jsonl"
VARIANT_MODELS = "students"
VARIANT_RUNS = "student_runs"

STAGES = (
    "index", "retrieve", "teacher-rerank", "parse", "train", "student-rerank",
    "evaluate", "cost-report", "behavior-report",
)


def make_transport(backend: str, endpoint: str = "", timeout: float = 120.0) -> Any:
    if backend.startswith("mock:"):
        return MockTransport.from_file(backend[len("mock:"):])
    if backend == "http":
        return HttpTransport(endpoint, timeout=timeout)
    raise ConfigError(f"unknown gateway backend {backend!r}")


def ranked_lists_from_run(path: str, queries: List[Query]) -> Dict[str, RankedList]:
    """query_id -> RankedList for every query; queries absent from the run get an empty list."""
    rows: Dict[str, List[Tuple[int, str, float]]] = {}
    for entry in load_run(path):
        rows.setdefault(entry.query_id, []).append((entry.rank, entry.doc_id, entry.score))
    return {
        query.query_id: RankedList(
            query_id=query.query_id,
            entries=[(doc_id, score) for _, doc_id, score in sorted(rows.get(query.query_id, []))],
        )
        for query in queries
    }


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def _write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def _fresh_dir(path: str) -> None:
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.makedirs(path)


class PipelineRunner:
    def __init__(self, config: RunConfig, force: bool = False, transport: Any = None,
                 sleep: Optional[Callable[[float], None]] = None):
        self.config = config
        self.force = force
        self.state = StateManager(config.run_dir)
        self.state.set_config(config.model_dump(mode="json"))
        self._transport = transport
        self._sleep = sleep
        self._corpus: Optional[Corpus] = None
        self._queries: Optional[List[Query]] = None
        self._qrels: Optional[Qrels] = None

    # --- Shared inputs ---
    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.config.data.corpus)
        return self._corpus

    @property
    def queries(self) -> List[Query]:
        if self._queries is None:
            self._queries = load_queries(self.config.data.queries)
        return self._queries

    @property
    def qrels(self) -> Qrels:
        if self._qrels is None:
            if not self.config.data.qrels:
                raise ConfigError("data.qrels is required for evaluation")
            self._qrels = load_qrels(self.config.data.qrels)
        return self._qrels

    @property
    def modes(self) -> List[PromptMode]:
        return list(dict.fromkeys(PromptMode(m) for m in self.config.prompting.modes))

    @property
    def bm25_params(self) -> BM25Params:
        return BM25Params(k1=self.config.retrieval.k1, b=self.config.retrieval.b)

    @property
    def transport(self) -> Any:
        if self._transport is None:
            gateway = self.config.gateway
            self._transport = make_transport(gateway.backend, gateway.endpoint, gateway.timeout_seconds)
        return self._transport

    def _progress(self, iterable, desc: str, total: Optional[int] = None):
        return tqdm(iterable, desc=desc, total=total, disable=not self.config.logging.progress)

    def _fingerprint(self, stage: str, **parts: Any) -> str:
        return canonical_hash({"stage": stage, **parts})

    def _first_stage(self) -> Dict[str, RankedList]:
        return ranked_lists_from_run(self.state.resolve(RETRIEVE_RUN), self.queries)

    def _teacher_outputs(self, mode: PromptMode) -> Dict[str, TeacherOutput]:
        outputs: Dict[str, TeacherOutput] = {}
        with open(self.state.resolve(os.path.join("parsed", f"{mode.value}.jsonl")), "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    output = TeacherOutput.model_validate_json(line)
                    outputs[output.query_id] = output
        return outputs

    # --- index / retrieve ---
    def cmd_index(self) -> StageRecord:
        fingerprint = self._fingerprint("index", corpus=hash_file(self.config.data.corpus))
        if not self.state.should_run("index", fingerprint, self.force):
            return self.state.record_of("index")
        index = build_index(self.corpus)
        save_index(index, self.state.resolve(INDEX_FILE))
        logging.info(f"Indexed {index.num_docs} documents, {len(index.postings)} terms, avgdl={index.avgdl:.2f}")
        return self.state.complete("index", fingerprint, {"index": INDEX_FILE},
                                   {"documents": index.num_docs, "terms": len(index.postings)})

    def cmd_retrieve(self) -> StageRecord:
        self.state.require("retrieve")
        fingerprint = self._fingerprint(
            "retrieve",
            index=self.state.output_hash("index", "index"),
            queries=hash_file(self.config.data.queries),
            retrieval=self.config.retrieval.model_dump(),
        )
        if not self.state.should_run("retrieve", fingerprint, self.force):
            return self.state.record_of("retrieve")
        index = load_index(self.state.resolve(INDEX_FILE))
        ranked = retrieve_all(index, self.queries, self.config.retrieval.topk, self.bm25_params)
        write_run(run_from_ranked_lists(ranked, "bm25"), self.state.resolve(RETRIEVE_RUN))
        empty = [r.query_id for r in ranked if len(r) == 0]
        if empty:
            logging.warning(f"{len(empty)} queries retrieved nothing: {empty}")
        return self.state.complete("retrieve", fingerprint, {"run": RETRIEVE_RUN},
                                   {"queries": len(ranked), "candidates": sum(len(r) for r in ranked)})

    # --- teacher ---
    def _replay_windows(self, query: Query, first_stage: RankedList,
                        respond: Callable[[int, PassageWindow], str]) -> List[WindowRanking]:
        """Sequential sliding windows: each window is cut from the list the previous one produced."""
        prompting = self.config.prompting
        working = first_stage.doc_ids()
        rankings: List[WindowRanking] = []
        for number, (start, end) in enumerate(window_spans(len(working), prompting.window, prompting.stride)):
            window = make_window(query.query_id, working, start, end, self.corpus, prompting.passage_tokens)
            window_ranking = rank_window(window, respond(number, window))
            working = apply_window(working, window_ranking)
            rankings.append(window_ranking)
        return rankings

    def _request(self, prompt: str) -> CompletionRequest:
        gateway = self.config.gateway
        return CompletionRequest(model=gateway.model, prompt=prompt, temperature=gateway.temperature,
                                 top_p=gateway.top_p, max_tokens=gateway.max_tokens)

    def _make_gateway(self) -> TeacherGateway:
        gateway = self.config.gateway
        kwargs = {"sleep": self._sleep} if self._sleep is not None else {}
        return TeacherGateway(
            transport=None if gateway.cache_only else self.transport,
            cache=ResponseCache(gateway.cache_dir),
            pricing=Pricing(**self.config.pricing.model_dump()),
            max_retries=gateway.max_retries,
            backoff_seconds=gateway.backoff_seconds,
            cache_only=gateway.cache_only,
            concurrency=gateway.concurrency,
            **kwargs,
        )

    def _rerank_mode(self, mode: PromptMode, first_stage: Dict[str, RankedList]) -> Dict[str, Any]:
        prompt_dir = self.state.resolve(os.path.join("prompts", mode.value))
        response_dir = self.state.resolve(os.path.join("responses", mode.value))
        _fresh_dir(prompt_dir)
        _fresh_dir(response_dir)
        gateway = self._make_gateway()
        # tokens the prompts cost when first fetched, whether or not this session hit the cache
        workload = {"input_tokens": 0, "output_tokens": 0, "requests": 0, "cost": 0.0}
        workload_lock = threading.Lock()

        def rerank_query(query: Query) -> int:
            def respond(number: int, window: PassageWindow) -> str:
                prompt = build_prompt(query, window, mode, self.config.prompting.schema_hint)
                _write_text(os.path.join(prompt_dir, query.query_id, f"w{number:02d}.txt"), prompt)
                result = gateway.complete(self._request(prompt))
                _write_text(os.path.join(response_dir, query.query_id, f"w{number:02d}.txt"), result.text)
                stored = gateway.cache.get(result.key)
                billed = UsageRecord(**stored["usage"]) if stored else result.usage
                with workload_lock:
                    workload["input_tokens"] += billed.input_tokens
                    workload["output_tokens"] += billed.output_tokens
                    workload["requests"] += 1
                    workload["cost"] += billed.cost
                return result.text

            return len(self._replay_windows(query, first_stage[query.query_id], respond))

        with ThreadPoolExecutor(max_workers=gateway.concurrency) as pool:
            windows = sum(self._progress(pool.map(rerank_query, self.queries), f"teacher {mode.value}", len(self.queries)))

        os.makedirs(self.state.resolve("usage"), exist_ok=True)
        gateway.ledger.write_csv(self.state.resolve(os.path.join("usage", f"{mode.value}.csv")))
        session = gateway.ledger.totals()
        logging.info(f"Teacher {mode.value}: {windows} windows, {session.requests} requests sent, "
                     f"session cost ${round_cost(session.cost):.3f}")
        return {
            "windows": windows,
            "session": {**session.model_dump(), "cost": round_cost(session.cost)},
            "workload": {**workload, "cost": round_cost(workload["cost"])},
        }

    def cmd_teacher_rerank(self) -> StageRecord:
        self.state.require("teacher-rerank")
        gateway = self.config.gateway
        fingerprint = self._fingerprint(
            "teacher-rerank",
            retrieve=self.state.output_hash("retrieve", "run"),
            corpus=hash_file(self.config.data.corpus),
            prompting=self.config.prompting.model_dump(mode="json"),
            request={"model": gateway.model, "temperature": gateway.temperature, "top_p": gateway.top_p,
                     "max_tokens": gateway.max_tokens},
        )
        if not self.state.should_run("teacher-rerank", fingerprint, self.force):
            return self.state.record_of("teacher-rerank")
        first_stage = self._first_stage()
        usage = {mode.value: self._rerank_mode(mode, first_stage) for mode in self.modes}
        return self.state.complete("teacher-rerank", fingerprint,
                                   {"prompts": "prompts", "responses": "responses", "usage": "usage"},
                                   {"modes": usage})

    # --- parse ---
    def cmd_parse(self) -> StageRecord:
        self.state.require("parse")
        fingerprint = self._fingerprint("parse", responses=self.state.output_hash("teacher-rerank", "responses"),
                                        retrieve=self.state.output_hash("retrieve", "run"))
        if not self.state.should_run("parse", fingerprint, self.force):
            return self.state.record_of("parse")
        first_stage = self._first_stage()
        _fresh_dir(self.state.resolve("parsed"))
        details: Dict[str, Any] = {}
        for mode in self.modes:
            response_dir = self.state.resolve(os.path.join("responses", mode.value))
            outputs: List[TeacherOutput] = []
            for query in self.queries:
                def respond(number: int, window: PassageWindow) -> str:
                    return _read_text(os.path.join(response_dir, query.query_id, f"w{number:02d}.txt"))
                rankings = self._replay_windows(query, first_stage[query.query_id], respond)
                outputs.append(merge_teacher_output(first_stage[query.query_id], rankings))

            with open(self.state.resolve(os.path.join("parsed", f"{mode.value}.jsonl")), "w", encoding="utf-8") as f:
                for output in outputs:
                    f.write(json.dumps(output.model_dump(), sort_keys=True, ensure_ascii=False) + "\n")
            ranked = [RankedList(query_id=o.query_id, entries=[(d, float(len(o.doc_order) - i)) for i, d in enumerate(o.doc_order)])
                      for o in outputs]
            write_run(run_from_ranked_lists(ranked, f"teacher-{mode.value}"),
                      self.state.resolve(os.path.join("parsed", f"{mode.value}.run")))
            details[mode.value] = {"queries": len(outputs), "with_defects": sum(1 for o in outputs if defect_records([o]))}
        return self.state.complete("parse", fingerprint, {"parsed": "parsed"}, details)

    # --- student ---
    def _extractor(self) -> FeatureExtractor:
        return FeatureExtractor(load_index(self.state.resolve(INDEX_FILE)), self.corpus,
                                self.config.training.hash_dim, self.bm25_params)

    @property
    def student_modes(self) -> List[PromptMode]:
        """Headline student (training.teacher_mode) first, then one variant per other student mode."""
        training = self.config.training
        requested = training.student_modes if training.student_modes is not None else self.modes
        headline = PromptMode(training.teacher_mode)
        return [headline] + [m for m in dict.fromkeys(PromptMode(m) for m in requested) if m != headline]

    def _student_files(self, mode: PromptMode) -> Dict[str, str]:
        if mode == PromptMode(self.config.training.teacher_mode):
            return {"model": MODEL_FILE, "loss_trace": LOSS_TRACE, "run": STUDENT_RUN, "reasons": STUDENT_REASONS}
        return {
            "model": os.path.join(VARIANT_MODELS, mode.value, "model.json"),
            "loss_trace": os.path.join(VARIANT_MODELS, mode.value, "loss_trace.csv"),
            "run": os.path.join(VARIANT_RUNS, f"{mode.value}.run"),
            "reasons": os.path.join(VARIANT_RUNS, f"{mode.value}.reasons.jsonl"),
        }

    def _train_student(self, mode: PromptMode, extractor: FeatureExtractor) -> Dict[str, Any]:
        training = self.config.training
        outputs = self._teacher_outputs(mode)
        vocab = GenerationVocab.build(
            (text for o in outputs.values() for text in reason_texts(o, training.reason_source).values()),
            size=training.vocab_size,
        )
        examples = build_examples(
            self.queries, self._first_stage(), outputs, extractor, vocab,
            reason_source=training.reason_source,
            targets=training.targets,
            qrels=self.qrels if training.targets == "qrels" else None,
            pair_cap=training.pair_cap,
            max_reason_tokens=training.max_reason_tokens,
        )
        available = len(examples)
        examples = subsample_examples(examples, training.train_size, training.seed)
        if training.train_size is not None and training.train_size > available:
            logging.warning(f"train_size {training.train_size} exceeds the {available} available examples")
        logging.info(f"Training on {len(examples)} of {available} examples from teacher mode {mode.value}")

        train_config = training.model_copy(update={"progress": self.config.logging.progress})
        result = train(examples, train_config, len(vocab))
        files = self._student_files(mode)
        os.makedirs(os.path.dirname(self.state.resolve(files["model"])), exist_ok=True)
        save_params(result.params, vocab, extractor.schema_hash(), self.state.resolve(files["model"]))
        write_loss_trace(result.trace, self.state.resolve(files["loss_trace"]))
        alpha, beta, gamma = (round(float(w), 6) for w in result.params.mix_weights())
        return {
            "available_examples": available,
            "train_size": len(examples),
            "epochs": len(result.trace),
            "final_loss": round(result.trace[-1].total, 6) if result.trace else None,
            "alpha": alpha, "beta": beta, "gamma": gamma,
        }

    def cmd_train(self) -> StageRecord:
        self.state.require("train")
        training = self.config.training
        fingerprint = self._fingerprint(
            "train",
            parsed=self.state.output_hash("parse", "parsed"),
            index=self.state.output_hash("index", "index"),
            training=training.model_dump(mode="json", exclude={"progress"}),
            student_modes=[m.value for m in self.student_modes],
            qrels=hash_file(self.config.data.qrels) if training.targets == "qrels" else None,
        )
        if not self.state.should_run("train", fingerprint, self.force):
            return self.state.record_of("train")
        _fresh_dir(self.state.resolve(VARIANT_MODELS))
        extractor = self._extractor()
        students = {mode.value: self._train_student(mode, extractor) for mode in self.student_modes}
        # headline student's numbers stay at the top level of the record
        details = {**students[self.student_modes[0].value], "students": students}
        return self.state.complete("train", fingerprint,
                                   {"model": MODEL_FILE, "loss_trace": LOSS_TRACE, "variants": VARIANT_MODELS}, details)

    def _rerank_with_student(self, mode: PromptMode, extractor: FeatureExtractor,
                             first_stage: Dict[str, RankedList]) -> int:
        files = self._student_files(mode)
        params, vocab, schema_hash = load_params(self.state.resolve(files["model"]))
        if schema_hash != extractor.schema_hash():
            raise StudentShapeError(f"model was trained on feature schema {schema_hash}, index gives {extractor.schema_hash()}")
        ranked_lists: List[RankedList] = []
        with open(self.state.resolve(files["reasons"]), "w", encoding="utf-8") as f:
            for query in self._progress(self.queries, f"student {mode.value}"):
                doc_ids = first_stage[query.query_id].doc_ids()
                if not doc_ids:
                    ranked_lists.append(RankedList(query_id=query.query_id))
                    continue
                ranked, reasons = rerank_student(
                    params, query.query_id, doc_ids, extractor.features(query, doc_ids), extractor.query_vector(query),
                    vocab, self.config.training.max_reason_tokens,
                )
                ranked_lists.append(ranked)
                f.write(json.dumps({"query_id": query.query_id, "reasons": reasons}, sort_keys=True, ensure_ascii=False) + "\n")
        write_run(run_from_ranked_lists(ranked_lists, f"student-{mode.value}"), self.state.resolve(files["run"]))
        return len(ranked_lists)

    def cmd_student_rerank(self) -> StageRecord:
        self.state.require("student-rerank")
        fingerprint = self._fingerprint(
            "student-rerank",
            model=self.state.output_hash("train", "model"),
            variants=self.state.output_hash("train", "variants"),
            retrieve=self.state.output_hash("retrieve", "run"),
            index=self.state.output_hash("index", "index"),
        )
        if not self.state.should_run("student-rerank", fingerprint, self.force):
            return self.state.record_of("student-rerank")
        _fresh_dir(self.state.resolve(VARIANT_RUNS))
        extractor = self._extractor()
        first_stage = self._first_stage()
        queries = {mode.value: self._rerank_with_student(mode, extractor, first_stage) for mode in self.student_modes}
        return self.state.complete(
            "student-rerank", fingerprint,
            {"run": STUDENT_RUN, "reasons": STUDENT_REASONS, "variants": VARIANT_RUNS},
            {"queries": queries[self.student_modes[0].value], "students": sorted(queries)},
        )

    # --- evaluate ---
    def _system_runs(self) -> Dict[str, Dict[str, List[str]]]:
        runs: Dict[str, Dict[str, List[str]]] = {"bm25": {q: r.doc_ids() for q, r in self._first_stage().items()}}
        for mode in self.modes:
            path = self.state.resolve(os.path.join("parsed", f"{mode.value}.run"))
            runs[f"teacher-{mode.value}"] = {q: r.doc_ids() for q, r in ranked_lists_from_run(path, self.queries).items()}
        for mode in self.student_modes:
            path = self.state.resolve(self._student_files(mode)["run"])
            runs[f"student-{mode.value}"] = {q: r.doc_ids() for q, r in ranked_lists_from_run(path, self.queries).items()}
        return runs

    def _reason_reports(self, mode: PromptMode) -> Tuple[List[MetricReport], float]:
        """A student's reasons against the teacher reasons it was trained to imitate."""
        reason_source = self.config.training.reason_source
        teacher = self._teacher_outputs(mode)
        bleu_by_query: Dict[str, float] = {}
        rouge_by_query: Dict[str, float] = {}
        pairs = []
        with open(self.state.resolve(self._student_files(mode)["reasons"]), "r", encoding="utf-8") as f:
            for line in f:
                record = json.loads(line)
                references = reason_texts(teacher[record["query_id"]], reason_source) if record["query_id"] in teacher else {}
                scored = []
                for doc_id, generated in sorted(record["reasons"].items()):
                    reference = tokenize(references.get(doc_id, ""))
                    if not reference:
                        continue
                    candidate = tokenize(generated)
                    scored.append((bleu(candidate, reference), rouge_l(candidate, reference)))
                    pairs.append((candidate, reference))
                if scored:
                    bleu_by_query[record["query_id"]] = float(np.mean([b for b, _ in scored]))
                    rouge_by_query[record["query_id"]] = float(np.mean([r for _, r in scored]))
        system = f"student-{mode.value}"
        reports = [MetricReport.from_values(f"bleu.{system}", bleu_by_query),
                   MetricReport.from_values(f"rouge_l.{system}", rouge_by_query)]
        return reports, corpus_bleu(pairs) if pairs else 0.0

    def _comparisons(self) -> List[Tuple[str, str]]:
        """(system, reference) pairs for the paired t-tests."""
        baseline = PromptMode(self.config.evaluation.baseline_mode)
        comparisons = [(f"teacher-{m.value}", f"teacher-{baseline.value}") for m in self.modes if m != baseline]
        if PromptMode.COMBINED in self.modes:
            comparisons += [("teacher-combined", f"teacher-{m.value}")
                            for m in (PromptMode.EXPLICIT, PromptMode.COMPARISON) if m in self.modes]
        comparisons += [(f"student-{m.value}", f"student-{baseline.value}") for m in self.student_modes if m != baseline]
        comparisons.append((f"student-{self.student_modes[0].value}", "bm25"))
        return list(dict.fromkeys(comparisons))

    def _t_tests(self, reports: Dict[Tuple[str, int], MetricReport]) -> Dict[str, TTestResult]:
        tests: Dict[str, TTestResult] = {}
        for k in self.config.evaluation.cutoffs:
            for system, reference in self._comparisons():
                if (system, k) not in reports or (reference, k) not in reports:
                    continue
                a, b = reports[(system, k)].aligned(reports[(reference, k)])
                if len(a) < 2:
                    logging.warning(f"Skipping t-test {system} vs {reference}: fewer than 2 judged queries")
                    continue
                tests[f"ndcg@{k} {system} vs {reference}"] = paired_t_test(a, b)
        return tests

    def cmd_evaluate(self) -> StageRecord:
        self.state.require("evaluate")
        fingerprint = self._fingerprint(
            "evaluate",
            qrels=hash_file(self.qrels_path()),
            retrieve=self.state.output_hash("retrieve", "run"),
            parsed=self.state.output_hash("parse", "parsed"),
            student=self.state.output_hash("student-rerank", "run"),
            reasons=self.state.output_hash("student-rerank", "reasons"),
            variants=self.state.output_hash("student-rerank", "variants"),
            evaluation=self.config.evaluation.model_dump(mode="json"),
        )
        if not self.state.should_run("evaluate", fingerprint, self.force):
            return self.state.record_of("evaluate")
        eval_dir = self.state.resolve("eval")
        _fresh_dir(eval_dir)

        reports: Dict[Tuple[str, int], MetricReport] = {}
        for system, rankings in self._system_runs().items():
            for k in self.config.evaluation.cutoffs:
                report = evaluate_run(rankings, self.qrels, k, name=f"ndcg.{system}")
                report.to_csv(os.path.join(eval_dir, f"{system}.ndcg@{k}.csv"))
                reports[(system, k)] = report
        tests = self._t_tests(reports)
        reason_reports: List[MetricReport] = []
        corpus_level_bleu: Dict[str, float] = {}
        for mode in self.student_modes:
            mode_reports, corpus_level_bleu[f"student-{mode.value}"] = self._reason_reports(mode)
            reason_reports.extend(mode_reports)
        for report in reason_reports:
            report.to_csv(os.path.join(eval_dir, f"{report.name}.csv"))

        write_summary_json(list(reports.values()) + reason_reports, tests, os.path.join(eval_dir, "summary.json"))
        self._write_table(reports, tests, reason_reports, corpus_level_bleu, os.path.join(eval_dir, "table.csv"))
        for (system, k), report in sorted(reports.items()):
            logging.info(f"NDCG@{k} {system}: {as_percent(report.mean)}")
        return self.state.complete("evaluate", fingerprint, {"eval": "eval"},
                                   {"systems": sorted({s for s, _ in reports}), "t_tests": len(tests)})

    def qrels_path(self) -> str:
        if not self.config.data.qrels:
            raise ConfigError("data.qrels is required for evaluation")
        return self.config.data.qrels

    def _write_table(self, reports: Dict[Tuple[str, int], MetricReport], tests: Dict[str, TTestResult],
                     reason_reports: List[MetricReport], corpus_level_bleu: Dict[str, float], path: str) -> None:
        """One row per system, NDCG per cutoff in percent.

        '*' marks a significant difference from the system's baseline (teacher-<baseline>,
        student-<baseline> or bm25); a dagger marks a significant difference of the combined
        mode over a single-reasoning mode.
        """
        cutoffs = self.config.evaluation.cutoffs
        baseline = PromptMode(self.config.evaluation.baseline_mode).value
        baselines = {f"teacher-{baseline}", f"student-{baseline}", "bm25"}
        markers: Dict[Tuple[str, int], set] = {}
        for label, result in tests.items():
            cutoff_part, system, _vs, reference = label.split(" ")
            if not significance_marker(result):
                continue
            marker = "*" if reference in baselines else "†"
            markers.setdefault((system, int(cutoff_part.split("@")[1])), set()).add(marker)
        lines = ["system," + ",".join(f"ndcg@{k}" for k in cutoffs)]
        for system in sorted({s for s, _ in reports}):
            cells = []
            for k in cutoffs:
                found = markers.get((system, k), set())
                suffix = "".join(m for m in ("*", "†") if m in found)
                cells.append(f"{as_percent(reports[(system, k)].mean)}{suffix}")
            lines.append(",".join([system] + cells))
        lines.append("")
        lines.append("reason_metric,value")
        for report in reason_reports:
            lines.append(f"{report.name},{as_percent(report.mean)}")
        for system, value in sorted(corpus_level_bleu.items()):
            lines.append(f"corpus_bleu.{system},{as_percent(value)}")
        _write_text(path, "\n".join(lines) + "\n")

    # --- reports ---
    def cmd_cost_report(self) -> StageRecord:
        self.state.require("cost-report")
        fingerprint = self._fingerprint(
            "cost-report",
            usage=self.state.record_of("teacher-rerank").details,
            pricing=self.config.pricing.model_dump(),
            profiles=self.config.cost_profiles,
        )
        if not self.state.should_run("cost-report", fingerprint, self.force):
            return self.state.record_of("cost-report")
        pricing = Pricing(**self.config.pricing.model_dump())
        query_count = max(1, len(self.queries))
        measured = {}
        for mode, usage in sorted(self.state.record_of("teacher-rerank").details.get("modes", {}).items()):
            workload = usage["workload"]
            per_query_in = workload["input_tokens"] / query_count
            per_query_out = workload["output_tokens"] / query_count
            measured[mode] = {
                "requests": workload["requests"],
                "input_tokens": workload["input_tokens"],
                "output_tokens": workload["output_tokens"],
                "cost_usd": estimate_cost(workload["input_tokens"], workload["output_tokens"], pricing),
                "per_query": {
                    "input_tokens": round(per_query_in, 1),
                    "output_tokens": round(per_query_out, 1),
                    "total_tokens": round(per_query_in + per_query_out, 1),
                    "cost_usd": round_cost(pricing.cost(per_query_in, per_query_out)),
                },
                "session_cost_usd": usage["session"]["cost"],
            }
        profiles = {}
        for mode, split in sorted(self.config.cost_profiles.items()):
            profile = CostProfile(mode=mode, **split)
            profiles[mode] = {"input_tokens": profile.input_tokens, "output_tokens": profile.output_tokens,
                              "total_tokens": profile.total_tokens, "cost_usd": profile_cost(profile, pricing)}
            logging.info(f"Cost profile {mode}: {profile.total_tokens} tokens -> ${profiles[mode]['cost_usd']:.3f} per query")
        _write_json(self.state.resolve(os.path.join("reports", "cost.json")),
                    {"pricing": pricing.model_dump(), "queries": len(self.queries), "measured": measured, "profiles": profiles})
        return self.state.complete("cost-report", fingerprint, {"cost": os.path.join("reports", "cost.json")})

    def cmd_behavior_report(self) -> StageRecord:
        self.state.require("behavior-report")
        fingerprint = self._fingerprint("behavior-report", parsed=self.state.output_hash("parse", "parsed"),
                                        precision=self.config.evaluation.behavior_precision)
        if not self.state.should_run("behavior-report", fingerprint, self.force):
            return self.state.record_of("behavior-report")
        stats_by_mode = {}
        outputs_relative = {"behavior": os.path.join("reports", "behavior.json")}
        for mode in self.modes:
            outputs = list(self._teacher_outputs(mode).values())
            stats_by_mode[mode.value] = analyze_behavior([o.defects for o in outputs], self.config.evaluation.behavior_precision)
            relative = os.path.join("reports", f"defects.{mode.value}.jsonl")
            os.makedirs(self.state.resolve("reports"), exist_ok=True)
            write_defect_log(defect_records(outputs), self.state.resolve(relative))
            outputs_relative[f"defects.{mode.value}"] = relative
        write_behavior_report(stats_by_mode, self.state.resolve(outputs_relative["behavior"]))
        return self.state.complete("behavior-report", fingerprint, outputs_relative,
                                   {mode: stats.model_dump() for mode, stats in stats_by_mode.items()})

    # --- all ---
    def run_stage(self, stage: str) -> StageRecord:
        handlers = {
            "index": self.cmd_index,
            "retrieve": self.cmd_retrieve,
            "teacher-rerank": self.cmd_teacher_rerank,
            "parse": self.cmd_parse,
            "train": self.cmd_train,
            "student-rerank": self.cmd_student_rerank,
            "evaluate": self.cmd_evaluate,
            "cost-report": self.cmd_cost_report,
            "behavior-report": self.cmd_behavior_report,
        }
        if stage not in handlers:
            raise ConfigError(f"unknown stage {stage!r}")
        logging.info(f"--- Stage {stage} ---")
        return handlers[stage]()

    def run_all(self) -> Dict[str, Any]:
        for stage in STAGES:
            if stage == "evaluate" and not self.config.data.qrels:
                logging.warning("No qrels configured; skipping evaluate")
                continue
            self.run_stage(stage)
        return self.state.get_state_stats()
