import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from gformula.config import Settings, settings
from gformula.errors import GFormulaError
from gformula.services import config_validator
from gformula.services.analysis import GFormulaAnalysis
from gformula.services.result_formatter import ResultFormatter, write_artifacts

logger = logging.getLogger("gformula")

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_CONFIG_ERROR = 2


def configure_logging(config: Settings) -> None:
    level = logging.DEBUG if config.debug else getattr(logging, config.log_level.upper(), logging.INFO)
    logger.setLevel(level)
    logger.handlers.clear()

    # Console
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    logger.addHandler(console_handler)

    # File
    if config.log_file:
        file_handler = logging.FileHandler(config.log_file)
        file_handler.setFormatter(logging.Formatter("[%(asctime)s] [%(levelname)s] %(message)s"))
        logger.addHandler(file_handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gformula", description="Parametric g-formula estimation")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the analysis described by a config file")
    run_parser.add_argument("config", type=Path)
    run_parser.add_argument("--seed", type=int)
    run_parser.add_argument("--workers", type=int)
    run_parser.add_argument("--output-dir", type=Path)
    run_parser.add_argument("--emit-sim-data", action="store_true", help="Write simulated trajectories")
    run_parser.add_argument("--rmses", action="store_true")
    run_parser.add_argument("--coefficients", action="store_true")
    run_parser.add_argument("--stderrs", action="store_true")
    run_parser.add_argument("--all-times", action="store_true", help="Print every horizon, not only the last")

    validate_parser = commands.add_parser("validate", help="Check a config file without running it")
    validate_parser.add_argument("config", type=Path)
    return parser


def _apply_overrides(config, args):
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.emit_sim_data:
        updates["sim_data"] = True
    output = config.output.model_copy(
        update={
            name: True
            for name in ("rmses", "coefficients", "stderrs", "all_times")
            if getattr(args, name)
        }
    )
    updates["output"] = output
    return config.model_copy(update=updates)


def _report(findings) -> None:
    for finding in findings:
        if finding.level == "error":
            logger.error(str(finding))
        else:
            logger.warning(str(finding))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(settings)

    try:
        config, findings = config_validator.load_config(args.config)
        if config is None:
            _report(findings)
            return EXIT_CONFIG_ERROR
        if args.command == "run":
            config = _apply_overrides(config, args)
        findings = config_validator.validate(config, config_validator.read_header(config, args.config.parent))
        _report(findings)
        if config_validator.has_errors(findings):
            return EXIT_CONFIG_ERROR
        if args.command == "validate":
            logger.info(f"{args.config}: no errors, {len(findings)} warning(s)")
            return EXIT_OK

        analysis = GFormulaAnalysis.from_path(args.config, config, workers=args.workers)
        result = analysis.run()
        output_dir = args.output_dir or Path(settings.output_dir)
        write_artifacts(result, output_dir, config.output, result.sim_data)
        print(ResultFormatter.format_results(result, config.output), end="")
    except GFormulaError as e:
        logger.error(e.describe())
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
