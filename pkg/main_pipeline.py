import os
import sys
import json
import logging
import argparse
from typing import List, Optional

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

from system.config_validator import ConfigError, ConfigValidator, RunConfig
from system.state_manager import ManifestMismatchError, MissingStageError
from system.pipeline_runner import STAGES, PipelineRunner
from tools.corpus_tools import CorpusFormatError
from tools.bm25_tools import EmptyCorpusError, IndexFormatError
from tools.metric_tools import MetricInputError
from tools.response_tools import EmptyBatchError
from tools.student_tools import StudentInputError, TrainingDivergedError
from tools.teacher_tools import GatewayError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_GATEWAY = 3

LOG_FORMAT = '%(asctime)s [%(levelname)s] - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'

VALIDATION_ERRORS = (
    ConfigError, ManifestMismatchError, MissingStageError, CorpusFormatError, EmptyCorpusError, IndexFormatError,
    MetricInputError, EmptyBatchError, StudentInputError,
)


def configure_logging(config: Optional[RunConfig], level: Optional[str] = None) -> None:
    """Console plus a log file next to the run directories; the file may be JSON lines."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if config is not None and config.logging.file:
        os.makedirs(config.run.output_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(config.run.output_dir, config.logging.file))
        if config.logging.format == "json":
            file_handler.setFormatter(jsonlogger.JsonFormatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
        handlers.append(file_handler)
    logging.basicConfig(
        level=(level or (config.logging.level if config else "INFO")).upper(),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Reasoning-augmented reranking pipeline: BM25, LLM teacher, distilled student.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="YAML run configuration.")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value; repeatable.")
    common.add_argument("--log-level", default=None)

    stage = argparse.ArgumentParser(add_help=False, parents=[common])
    stage.add_argument("--force", action="store_true", help="Redo a stage whose recorded inputs differ from the current ones.")
    stage.add_argument("--gateway", default=None, help="'http' or 'mock:<script path>'.")
    stage.add_argument("--mode", action="append", default=None, choices=["basic", "explicit", "comparison", "combined"])
    stage.add_argument("--window", type=int, default=None)
    stage.add_argument("--stride", type=int, default=None)
    stage.add_argument("--topk", type=int, default=None)
    stage.add_argument("--k1", type=float, default=None)
    stage.add_argument("--b", type=float, default=None)
    stage.add_argument("--train-size", type=int, default=None, help="Subsample this many training queries.")

    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in STAGES + ("run-all",):
        sub.add_parser(name, parents=[stage], help=f"Run the {name} stage." if name != "run-all" else "Run every stage.")
    sub.add_parser("validate-config", parents=[common], help="Print the configuration validation report.")
    return parser


def overrides_from_args(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    flag_map = {
        "gateway": "gateway.backend",
        "window": "prompting.window",
        "stride": "prompting.stride",
        "topk": "retrieval.topk",
        "k1": "retrieval.k1",
        "b": "retrieval.b",
        "train_size": "training.train_size",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "mode", None):
        overrides.append(f"prompting.modes=[{', '.join(args.mode)}]")
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    validator = ConfigValidator(args.config, overrides_from_args(args))

    if args.cmd == "validate-config":
        report = validator.get_validation_report()
        print(report)
        return EXIT_OK if validator.config is not None else EXIT_VALIDATION

    try:
        config = validator.load()
    except ConfigError as e:
        configure_logging(None, args.log_level)
        logging.error(str(e))
        return EXIT_VALIDATION
    configure_logging(config, args.log_level)

    try:
        runner = PipelineRunner(config, force=args.force)
        if args.cmd == "run-all":
            stats = runner.run_all()
            logging.info(f"Run complete: {json.dumps(stats, sort_keys=True)}")
        else:
            runner.run_stage(args.cmd)
    except VALIDATION_ERRORS as e:
        logging.error(f"{type(e).__name__}: {e}")
        return EXIT_VALIDATION
    except GatewayError as e:
        logging.error(f"Teacher gateway failed after {e.attempts} attempt(s): {e}")
        return EXIT_GATEWAY
    except TrainingDivergedError as e:
        logging.error(str(e), exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
