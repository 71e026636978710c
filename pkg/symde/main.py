import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .core.config import PipelineConfig, load_config, parse_config, settings
from .core.datagen import BUILTIN_DATASETS
from .core.errors import ConfigError, StageError, SymdeError, error_record
from .core.utils import write_json
from .pipeline import run_pipeline
from . import stages

logger = logging.getLogger(__name__)

ERROR_RECORD = "error.json"


def _overrides(pairs: Sequence[str]) -> Dict[str, str]:
    values = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        values[key.strip()] = value.strip()
    return values


def _config(args) -> PipelineConfig:
    overrides = _overrides(args.set or [])
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = str(args.threads)
    out = getattr(args, "out", None) or getattr(args, "dir", None)
    if out is not None:
        overrides["output_dir"] = str(out)
    if args.config is not None:
        return load_config(args.config, overrides)
    return parse_config(overrides).validate()


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="pipeline configuration file (key = value lines)")
    parser.add_argument("--threads", type=int, help="worker threads for SR; 1 forces determinism")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.PROJECT_NAME,
        description="Recover closed-form density expressions from samples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every stage")
    _add_config_options(run)
    run.add_argument("--samples", type=Path, help="sample CSV (overrides the configured input)")
    run.add_argument("--out", type=Path, help="output directory")

    gen = sub.add_parser("gen-data", help="draw samples from a builtin dataset")
    gen.add_argument("name", choices=BUILTIN_DATASETS)
    gen.add_argument("--n", type=int, default=10_000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True, help="sample CSV to write")

    fit = sub.add_parser("fit-density", help="ingest, decompose and estimate density grids")
    _add_config_options(fit)
    fit.add_argument("--samples", type=Path)
    fit.add_argument("--out", type=Path)

    for name, help_text in (
        ("find-support", "estimate the support of every part"),
        ("run-sr", "symbolic regression per part and recombination"),
        ("validate", "local mass report and residual grid"),
    ):
        stage_parser = sub.add_parser(name, help=help_text)
        _add_config_options(stage_parser)
        stage_parser.add_argument("--dir", type=Path, help="run directory holding earlier artifacts")

    report = sub.add_parser("report", help="merge runs into a complexity vs log-likelihood table")
    report.add_argument("dirs", nargs="+", type=Path)
    report.add_argument("--out", type=Path, required=True)
    return parser


def dispatch(args) -> None:
    if args.command == "gen-data":
        stages.gen_data(args.name, args.n, args.seed, args.out)
        return
    if args.command == "report":
        stages.loss_regime_report(args.dirs, args.out)
        return

    config = _config(args)
    out = Path(config.output_dir)
    if args.command == "run":
        run_pipeline(config, args.samples)
    elif args.command == "fit-density":
        stages.fit_density(config, out, args.samples)
    elif args.command == "find-support":
        stages.find_support(config, out)
    elif args.command == "run-sr":
        stages.run_sr(config, out)
    elif args.command == "validate":
        stages.validate_run(config, out)


def _error_dir(args) -> Optional[Path]:
    for name in ("out", "dir"):
        value = getattr(args, name, None)
        if value is not None:
            return value.parent if args.command in ("gen-data", "report") else value
    return None


def _report_failure(args, record: dict) -> int:
    print(json.dumps(record), file=sys.stderr)
    target = _error_dir(args)
    if target is not None:
        try:
            write_json(target / ERROR_RECORD, record)
        except OSError:
            logger.warning("could not write %s into %s", ERROR_RECORD, target)
    return record["exit_code"]


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except SymdeError as e:
        return _report_failure(args, e.to_record() if isinstance(e, StageError) else error_record(e, "config"))
    except Exception as e:
        logger.exception("%s failed", args.command)
        return _report_failure(args, error_record(e, "internal"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
