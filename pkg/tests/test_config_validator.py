import os

import pytest

from system.config_validator import ConfigError, ConfigValidator, RunConfig, apply_overrides
from tools.prompt_tools import PromptMode


class TestValidate:
    def test_shipped_config_is_valid(self, tmp_path, toy_raw, write_config):
        validator = ConfigValidator(write_config(toy_raw))
        is_valid, errors, _ = validator.validate()
        assert is_valid, errors
        config = validator.config
        assert config.retrieval.topk == 30
        assert config.prompting.modes == list(PromptMode)
        assert config.cost_profiles["combined"] == {"input_tokens": 2833, "output_tokens": 1817}
        assert config.run_dir == os.path.join(str(tmp_path / "runs"), "toy")

    def test_missing_data_section(self, toy_raw, write_config):
        del toy_raw["data"]
        is_valid, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert not is_valid
        assert "Missing required section: data" in errors

    def test_stride_larger_than_window(self, toy_raw, write_config):
        toy_raw["prompting"]["stride"] = 25
        is_valid, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert not is_valid
        assert any("prompting.stride" in e for e in errors)

    def test_out_of_range_value_is_reported_with_location(self, toy_raw, write_config):
        toy_raw["retrieval"]["b"] = 1.5
        is_valid, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert not is_valid
        assert any(e.startswith("retrieval.b:") for e in errors)

    def test_unknown_backend(self, toy_raw, write_config):
        toy_raw["gateway"]["backend"] = "carrier-pigeon"
        _, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert any("gateway.backend" in e for e in errors)

    def test_missing_corpus_file(self, tmp_path, toy_raw, write_config):
        toy_raw["data"]["corpus"] = str(tmp_path / "nowhere.jsonl")
        _, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert any("data.corpus does not exist" in e for e in errors)

    def test_qrels_targets_need_qrels(self, toy_raw, write_config):
        del toy_raw["data"]["qrels"]
        toy_raw["training"]["targets"] = "qrels"
        _, errors, warnings = ConfigValidator(write_config(toy_raw)).validate()
        assert "training.targets=qrels requires data.qrels" in errors
        assert any("evaluate will be skipped" in w for w in warnings)

    def test_teacher_mode_must_be_run(self, toy_raw, write_config):
        toy_raw["prompting"]["modes"] = ["basic"]
        _, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert any("training.teacher_mode" in e for e in errors)

    def test_student_modes_must_be_run(self, toy_raw, write_config):
        toy_raw["prompting"]["modes"] = ["basic", "combined"]
        toy_raw["training"]["student_modes"] = ["basic", "explicit"]
        _, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert "training.student_modes entry explicit is not among prompting.modes" in errors

    def test_incomplete_cost_profile(self, toy_raw, write_config):
        toy_raw["cost_profiles"]["explicit"] = {"input_tokens": 10}
        _, errors, _ = ConfigValidator(write_config(toy_raw)).validate()
        assert "cost_profiles.explicit is missing ['output_tokens']" in errors

    def test_unknown_section_is_a_warning(self, toy_raw, write_config):
        toy_raw["calendar"] = {"timezone": "UTC"}
        is_valid, _, warnings = ConfigValidator(write_config(toy_raw)).validate()
        assert is_valid
        assert "Unknown section ignored: calendar" in warnings

    def test_missing_file(self, tmp_path):
        is_valid, errors, _ = ConfigValidator(str(tmp_path / "absent.yaml")).validate()
        assert not is_valid
        assert "config file not found" in errors[0]

    def test_load_raises(self, toy_raw, write_config):
        toy_raw["prompting"]["window"] = 1
        with pytest.raises(ConfigError, match="invalid configuration"):
            ConfigValidator(write_config(toy_raw)).load()

    def test_report(self, toy_raw, write_config):
        toy_raw["prompting"]["stride"] = 99
        report = ConfigValidator(write_config(toy_raw)).get_validation_report()
        assert "Overall Status: INVALID" in report
        assert "prompting.stride (99)" in report


class TestOverrides:
    def test_cli_overrides_win(self, toy_raw, write_config):
        path = write_config(toy_raw)
        config = ConfigValidator(path, ["retrieval.topk=12", "prompting.modes=[basic, combined]",
                                        "training.train_size=3"]).load()
        assert config.retrieval.topk == 12
        assert config.prompting.modes == [PromptMode.BASIC, PromptMode.COMBINED]
        assert config.training.train_size == 3

    def test_yaml_scalars(self):
        merged = apply_overrides({"a": {"x": 1}}, ["a.x=2.5", "a.flag=true", "b.name=hello"])
        assert merged == {"a": {"x": 2.5, "flag": True}, "b": {"name": "hello"}}

    def test_original_is_untouched(self):
        raw = {"a": {"x": 1}}
        apply_overrides(raw, ["a.x=2"])
        assert raw == {"a": {"x": 1}}

    @pytest.mark.parametrize("item", ["retrieval.topk", "topk=3", "a.x.y=1"])
    def test_malformed(self, item):
        with pytest.raises(ConfigError):
            apply_overrides({"a": {"x": 1}}, [item])

    def test_defaults(self):
        config = RunConfig.model_validate({"data": {"corpus": "c", "queries": "q"}})
        assert (config.retrieval.k1, config.retrieval.b) == (0.9, 0.4)
        assert (config.prompting.window, config.prompting.stride) == (20, 10)
        assert config.training.teacher_mode == PromptMode.COMBINED

    def test_training_seed_follows_run_seed(self):
        config = RunConfig.model_validate({"data": {"corpus": "c", "queries": "q"}, "run": {"seed": 7}})
        assert config.training.seed == 7

    def test_explicit_training_seed_wins(self, toy_raw, write_config):
        config = ConfigValidator(write_config(toy_raw), ["run.seed=3", "training.seed=11"]).load()
        assert (config.run.seed, config.training.seed) == (3, 11)
        assert ConfigValidator(write_config(toy_raw), ["run.seed=3"]).load().training.seed == 3
