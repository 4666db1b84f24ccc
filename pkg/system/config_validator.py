import os
import copy
import logging
from datetime import datetime
from typing import Dict, Any, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from tools.prompt_tools import PromptMode
from tools.student_tools import TrainConfig


class ConfigError(ValueError):
    pass


# --- Pydantic Models ---
class RunSection(BaseModel):
    name: str = "toy"
    output_dir: str = "runs"
    seed: int = 42


class DataSection(BaseModel):
    corpus: str
    queries: str
    qrels: Optional[str] = None


class RetrievalSection(BaseModel):
    k1: float = Field(0.9, gt=0.0)
    b: float = Field(0.4, ge=0.0, le=1.0)
    topk: int = Field(100, ge=1)


class PromptingSection(BaseModel):
    modes: List[PromptMode] = Field(default_factory=lambda: list(PromptMode))
    window: int = Field(20, ge=2)
    stride: int = Field(10, ge=1)
    passage_tokens: int = Field(120, ge=1)
    schema_hint: bool = False


class GatewaySection(BaseModel):
    backend: str = Field("mock:data/toy/mock_teacher.json", description="'http' or 'mock:<script path>'.")
    endpoint: str = ""
    model: str = "gpt-4"
    temperature: float = Field(1.0, ge=0.0)
    top_p: float = Field(0.9, gt=0.0, le=1.0)
    max_tokens: int = Field(2048, ge=1)
    max_retries: int = Field(3, ge=0)
    backoff_seconds: float = Field(1.0, ge=0.0)
    concurrency: int = Field(4, ge=1)
    cache_dir: str = "cache/teacher"
    cache_only: bool = False
    timeout_seconds: float = Field(120.0, gt=0.0)


class PricingSection(BaseModel):
    input_per_1k: float = Field(0.03, ge=0.0)
    output_per_1k: float = Field(0.06, ge=0.0)


class TrainingSection(TrainConfig):
    targets: str = Field("teacher", pattern="^(teacher|qrels)$")
    teacher_mode: PromptMode = PromptMode.COMBINED
    student_modes: Optional[List[PromptMode]] = Field(None, description="Teacher modes to distil a student from; all prompting modes when unset.")
    reason_source: str = Field("direct", pattern="^(direct|listwise|both)$")
    hash_dim: int = Field(64, ge=1)
    vocab_size: int = Field(2048, ge=1)
    pair_cap: int = Field(50, ge=1)
    max_reason_tokens: int = Field(32, ge=2)
    train_size: Optional[int] = Field(None, ge=1)


class EvaluationSection(BaseModel):
    cutoffs: List[int] = Field(default_factory=lambda: [5, 10])
    baseline_mode: PromptMode = PromptMode.BASIC
    behavior_precision: int = Field(0, ge=0, le=4)


class LoggingSection(BaseModel):
    level: str = "INFO"
    format: str = Field("text", pattern="^(text|json)$")
    file: Optional[str] = "reasonrank_pipeline.log"
    progress: bool = True


class RunConfig(BaseModel):
    run: RunSection = Field(default_factory=RunSection)
    data: DataSection
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    prompting: PromptingSection = Field(default_factory=PromptingSection)
    gateway: GatewaySection = Field(default_factory=GatewaySection)
    pricing: PricingSection = Field(default_factory=PricingSection)
    cost_profiles: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    training: TrainingSection = Field(default_factory=TrainingSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)

    @model_validator(mode="after")
    def _inherit_run_seed(self) -> "RunConfig":
        # training.seed follows run.seed unless set explicitly
        if "seed" not in self.training.model_fields_set:
            self.training.seed = self.run.seed
        return self

    @property
    def run_dir(self) -> str:
        return os.path.join(self.run.output_dir, self.run.name)


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply 'section.key=value' overrides; values are parsed as YAML scalars."""
    merged = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        parts = [p for p in dotted.strip().split(".") if p]
        if len(parts) < 2:
            raise ConfigError(f"override {item!r} must name a section and a key")
        node = merged
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section value")
        node[parts[-1]] = yaml.safe_load(value)
    return merged


def load_raw_config(config_path: str) -> Dict[str, Any]:
    try:
        with open(config_path, 'r', encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {config_path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {config_path} is not valid YAML: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {config_path} must hold a mapping at top level")
    return raw


class ConfigValidator:
    REQUIRED_SECTIONS = ("data",)
    KNOWN_SECTIONS = set(RunConfig.model_fields)

    def __init__(self, config_path: str = "config.yaml", overrides: Sequence[str] = ()):
        self.config_path = config_path
        self.overrides = list(overrides)
        self.raw: Dict[str, Any] = {}
        self.config: Optional[RunConfig] = None
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def _check_paths(self, config: RunConfig) -> None:
        for name in ("corpus", "queries", "qrels"):
            path = getattr(config.data, name)
            if path and not os.path.exists(path):
                self.errors.append(f"data.{name} does not exist: {path}")
        if not config.data.qrels:
            self.warnings.append("data.qrels not set; evaluate will be skipped")
        backend = config.gateway.backend
        if backend.startswith("mock:"):
            script = backend[len("mock:"):]
            if not os.path.exists(script):
                self.errors.append(f"mock gateway script does not exist: {script}")
        elif backend == "http":
            if not config.gateway.endpoint and not config.gateway.cache_only:
                self.errors.append("gateway.endpoint is required for the http backend")
            if not os.getenv("REASONRANK_API_KEY"):
                self.warnings.append("REASONRANK_API_KEY is not set; requests go out unauthenticated")
        else:
            self.errors.append(f"gateway.backend must be 'http' or 'mock:<script>', got {backend!r}")

    def _check_ranges(self, config: RunConfig) -> None:
        prompting = config.prompting
        if prompting.stride > prompting.window:
            self.errors.append(f"prompting.stride ({prompting.stride}) must not exceed prompting.window ({prompting.window})")
        if config.retrieval.topk < prompting.window:
            self.warnings.append("retrieval.topk is smaller than prompting.window; each query fits in one window")
        if config.training.teacher_mode not in prompting.modes:
            self.errors.append(f"training.teacher_mode {config.training.teacher_mode.value} is not among prompting.modes")
        for mode in config.training.student_modes or []:
            if mode not in prompting.modes:
                self.errors.append(f"training.student_modes entry {mode.value} is not among prompting.modes")
        if config.evaluation.baseline_mode not in prompting.modes:
            self.warnings.append(f"evaluation.baseline_mode {config.evaluation.baseline_mode.value} is not run; no t-tests")
        if any(k < 1 for k in config.evaluation.cutoffs):
            self.errors.append("evaluation.cutoffs must all be >= 1")
        if config.training.targets == "qrels" and not config.data.qrels:
            self.errors.append("training.targets=qrels requires data.qrels")
        for mode, profile in config.cost_profiles.items():
            missing = {"input_tokens", "output_tokens"} - set(profile)
            if missing:
                self.errors.append(f"cost_profiles.{mode} is missing {sorted(missing)}")

    def validate(self) -> Tuple[bool, List[str], List[str]]:
        """Validate the configuration file.
        Returns: (is_valid, errors, warnings)"""
        self.errors, self.warnings, self.config = [], [], None
        try:
            self.raw = apply_overrides(load_raw_config(self.config_path), self.overrides)
        except ConfigError as e:
            self.errors.append(str(e))
            return False, self.errors, self.warnings

        for section in self.REQUIRED_SECTIONS:
            if section not in self.raw:
                self.errors.append(f"Missing required section: {section}")
        for section in sorted(set(self.raw) - self.KNOWN_SECTIONS):
            self.warnings.append(f"Unknown section ignored: {section}")
        if self.errors:
            return False, self.errors, self.warnings

        try:
            config = RunConfig.model_validate({k: v for k, v in self.raw.items() if k in self.KNOWN_SECTIONS})
        except ValidationError as e:
            for problem in e.errors():
                location = ".".join(str(part) for part in problem["loc"])
                self.errors.append(f"{location}: {problem['msg']}")
            return False, self.errors, self.warnings

        self._check_paths(config)
        self._check_ranges(config)
        if not self.errors:
            self.config = config
        return len(self.errors) == 0, self.errors, self.warnings

    def load(self) -> RunConfig:
        is_valid, errors, _ = self.validate()
        for warning in self.warnings:
            logging.warning(f"Config: {warning}")
        if not is_valid:
            raise ConfigError("invalid configuration: " + "; ".join(errors))
        return self.config

    def get_validation_report(self) -> str:
        """Generate a human-readable validation report."""
        is_valid, errors, warnings = self.validate()

        report = []
        report.append(f"Configuration Validation Report - {datetime.now().isoformat()}")
        report.append("=" * 50)
        report.append(f"Config file: {self.config_path}")
        report.append(f"Overall Status: {'VALID' if is_valid else 'INVALID'}")
        report.append("\nErrors:")
        if errors:
            for error in errors:
                report.append(f"  - {error}")
        else:
            report.append("  None")

        report.append("\nWarnings:")
        if warnings:
            for warning in warnings:
                report.append(f"  - {warning}")
        else:
            report.append("  None")

        return "\n".join(report)
