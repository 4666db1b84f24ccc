import os
import json
import hashlib

import pytest

from main_pipeline import EXIT_GATEWAY, EXIT_OK, EXIT_VALIDATION, main
from system.config_validator import ConfigValidator
from system.pipeline_runner import PipelineRunner
from system.state_manager import ManifestMismatchError, MissingStageError
from tools.mock_tools import MockTransport
from tools.corpus_tools import load_run


def _snapshot(root):
    files = {}
    for directory, _, names in os.walk(root):
        for name in names:
            path = os.path.join(directory, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = hashlib.sha256(f.read()).hexdigest()
    return files


def _mock_script(tmp_path, name, script):
    path = tmp_path / name
    path.write_text(json.dumps(script), encoding="utf-8")
    return "mock:" + str(path)


def _load(write_config, raw, overrides=()):
    return ConfigValidator(write_config(raw), overrides).load()


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def toy_config(toy_raw, write_config):
    return _load(write_config, toy_raw)


class TestEndToEnd:
    def test_full_run_writes_every_artifact(self, toy_config):
        runner = PipelineRunner(toy_config)
        stats = runner.run_all()
        assert stats["pending"] == []
        run_dir = toy_config.run_dir
        for relative in ("index.rrix", "retrieve.run", "model.json", "loss_trace.csv", "student.run",
                         "student_reasons.jsonl", "eval/summary.json", "eval/table.csv",
                         "reports/cost.json", "reports/behavior.json", "usage/combined.csv"):
            assert os.path.exists(os.path.join(run_dir, relative)), relative
        for mode in ("basic", "explicit", "comparison", "combined"):
            assert os.path.exists(os.path.join(run_dir, "parsed", f"{mode}.jsonl"))
            assert os.path.exists(os.path.join(run_dir, "prompts", mode, "q1", "w00.txt"))
            assert os.path.exists(os.path.join(run_dir, "responses", mode, "q1", "w00.txt"))
        for mode in ("basic", "explicit", "comparison"):
            assert os.path.exists(os.path.join(run_dir, "students", mode, "model.json"))
            assert os.path.exists(os.path.join(run_dir, "student_runs", f"{mode}.run"))
        assert not os.path.exists(os.path.join(run_dir, "students", "combined"))

        student = load_run(os.path.join(run_dir, "student.run"))
        bm25 = load_run(os.path.join(run_dir, "retrieve.run"))
        assert sorted((e.query_id, e.doc_id) for e in student) == sorted((e.query_id, e.doc_id) for e in bm25)

        summary = _read_json(os.path.join(run_dir, "eval", "summary.json"))
        assert "ndcg.student-combined@5" in summary["metrics"]
        assert "bleu.student-explicit" in summary["metrics"]
        for label in ("ndcg@10 student-combined vs bm25", "ndcg@5 teacher-combined vs teacher-basic",
                      "ndcg@5 teacher-combined vs teacher-explicit", "ndcg@5 teacher-combined vs teacher-comparison",
                      "ndcg@5 student-explicit vs student-basic", "ndcg@10 student-combined vs student-basic"):
            assert label in summary["t_tests"], label

        cost = _read_json(os.path.join(run_dir, "reports", "cost.json"))
        assert {mode: p["cost_usd"] for mode, p in cost["profiles"].items()} == \
            {"explicit": 0.134, "comparison": 0.158, "combined": 0.194}
        assert cost["measured"]["basic"]["requests"] > 0

        behavior = _read_json(os.path.join(run_dir, "reports", "behavior.json"))
        assert behavior["combined"]["queries"] == 5

        manifest = _read_json(os.path.join(run_dir, "manifest.json"))
        weights = manifest["stages"]["train"]["details"]
        assert weights["alpha"] + weights["beta"] + weights["gamma"] == pytest.approx(1.0, abs=1e-5)
        assert sorted(weights["students"]) == ["basic", "combined", "comparison", "explicit"]
        assert weights["students"]["combined"]["alpha"] == weights["alpha"]

    def test_second_run_is_a_no_op(self, toy_config):
        PipelineRunner(toy_config).run_all()
        before = _snapshot(toy_config.run_dir)
        transport = MockTransport({"strategy": "reverse"})
        PipelineRunner(toy_config, transport=transport).run_all()
        assert transport.calls == 0
        assert _snapshot(toy_config.run_dir) == before

    def test_warm_cache_replays_offline(self, toy_raw, write_config):
        first = _load(write_config, toy_raw)
        PipelineRunner(first).run_all()
        toy_raw["run"]["name"] = "offline"
        toy_raw["gateway"]["cache_only"] = True
        second = _load(write_config, toy_raw)
        runner = PipelineRunner(second)
        for stage in ("index", "retrieve", "teacher-rerank", "parse"):
            runner.run_stage(stage)
        for mode in ("basic", "combined"):
            relative = os.path.join("parsed", f"{mode}.jsonl")
            with open(os.path.join(first.run_dir, relative), "rb") as a, open(os.path.join(second.run_dir, relative), "rb") as b:
                assert a.read() == b.read()
        workload = runner.state.record_of("teacher-rerank").details["modes"]["combined"]
        assert workload["session"]["requests"] == 0
        assert workload["workload"]["input_tokens"] > 0

    def test_identical_rankings_are_not_significant(self, tmp_path, toy_raw, write_config):
        toy_raw["gateway"]["backend"] = _mock_script(tmp_path, "identity.json", {"strategy": "identity"})
        toy_raw["prompting"]["modes"] = ["basic", "explicit", "combined"]
        config = _load(write_config, toy_raw)
        PipelineRunner(config).run_all()
        summary = _read_json(os.path.join(config.run_dir, "eval", "summary.json"))
        result = summary["t_tests"]["ndcg@5 teacher-explicit vs teacher-basic"]
        assert (result["t"], result["p"], result["significant"]) == (0.0, 1.0, False)
        metrics = summary["metrics"]
        assert metrics["ndcg.teacher-basic@10"] == metrics["ndcg.bm25@10"]


class TestStages:
    def test_stage_needs_its_prerequisite(self, toy_config):
        with pytest.raises(MissingStageError):
            PipelineRunner(toy_config).run_stage("train")

    def test_train_size_change_needs_force(self, toy_raw, write_config):
        config = _load(write_config, toy_raw, ["training.train_size=2"])
        runner = PipelineRunner(config)
        for stage in ("index", "retrieve", "teacher-rerank", "parse", "train"):
            runner.run_stage(stage)
        assert runner.state.record_of("train").details["train_size"] == 2

        resized = _load(write_config, toy_raw, ["training.train_size=4"])
        with pytest.raises(ManifestMismatchError):
            PipelineRunner(resized).run_stage("train")
        forced = PipelineRunner(resized, force=True)
        forced.run_stage("train")
        assert forced.state.record_of("train").details["train_size"] == 4
        assert forced.state.record_of("parse").completed

    def test_changed_window_redoes_teacher_stage(self, toy_raw, write_config):
        config = _load(write_config, toy_raw, ["prompting.modes=[basic]", "training.teacher_mode=basic"])
        runner = PipelineRunner(config)
        for stage in ("index", "retrieve", "teacher-rerank", "parse"):
            runner.run_stage(stage)
        narrow = _load(write_config, toy_raw, ["prompting.modes=[basic]", "training.teacher_mode=basic",
                                               "prompting.window=5", "prompting.stride=3"])
        forced = PipelineRunner(narrow, force=True)
        forced.run_stage("teacher-rerank")
        assert not forced.state.record_of("parse").completed
        assert forced.state.record_of("teacher-rerank").details["modes"]["basic"]["windows"] > \
            runner.state.record_of("teacher-rerank").details["modes"]["basic"]["windows"]

    def test_student_modes_pick_the_variants(self, toy_raw, write_config):
        config = _load(write_config, toy_raw, ["training.student_modes=[basic]", "training.epochs=2"])
        runner = PipelineRunner(config)
        for stage in ("index", "retrieve", "teacher-rerank", "parse", "train", "student-rerank", "evaluate"):
            runner.run_stage(stage)
        assert [m.value for m in runner.student_modes] == ["combined", "basic"]
        assert sorted(runner.state.record_of("train").details["students"]) == ["basic", "combined"]
        assert os.path.exists(os.path.join(config.run_dir, "student_runs", "basic.run"))
        assert not os.path.exists(os.path.join(config.run_dir, "students", "explicit"))
        tests = _read_json(os.path.join(config.run_dir, "eval", "summary.json"))["t_tests"]
        assert "ndcg@5 student-combined vs student-basic" in tests
        assert not any("student-explicit" in label for label in tests)


class TestMain:
    def test_run_all_exit_code(self, toy_raw, write_config):
        assert main(["run-all", "--config", write_config(toy_raw)]) == EXIT_OK

    def test_invalid_config(self, toy_raw, write_config):
        assert main(["index", "--config", write_config(toy_raw), "--stride", "50"]) == EXIT_VALIDATION

    def test_missing_stage(self, toy_raw, write_config):
        assert main(["parse", "--config", write_config(toy_raw)]) == EXIT_VALIDATION

    def test_gateway_failure(self, tmp_path, toy_raw, write_config):
        toy_raw["gateway"]["backend"] = _mock_script(tmp_path, "down.json", {"status_sequence": [503] * 200})
        assert main(["run-all", "--config", write_config(toy_raw)]) == EXIT_GATEWAY

    def test_validate_config(self, toy_raw, write_config, capsys):
        assert main(["validate-config", "--config", write_config(toy_raw)]) == EXIT_OK
        assert "Overall Status: VALID" in capsys.readouterr().out
