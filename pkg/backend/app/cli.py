"""Command-line entry point: snowdensity <command> [--config FILE] [--seed N] [--out-dir DIR] [--threads N]"""
import argparse
import json
import sys
from typing import List, Optional
from pydantic import ValidationError
from backend.app import __version__
from backend.app.config import load_run_config
from backend.app.exceptions import SnowDensityError
from backend.app.utils.logger import logger
from backend.app.workflow.pipeline import AnalysisPipeline

COMMANDS = ("simulate", "fit", "waic", "predict", "summarize", "semivariogram", "compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snowdensity",
                                     description="Spatially varying snow density models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON file")
    common.add_argument("--seed", type=int, help="overrides chain.seed")
    common.add_argument("--out-dir", help="output directory (default: SNOWDENSITY_OUT_DIR)")
    common.add_argument("--threads", type=int, help="threads for likelihood evaluation")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name == "fit":
            cmd.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        if name == "semivariogram":
            cmd.add_argument("--parameter", default="alpha", help="site parameter or covariate")
            cmd.add_argument("--bins", type=int, default=12)
    return parser


def _error_line(record: dict) -> None:
    sys.stderr.write(json.dumps(record, default=str) + "\n")


def run_command(args: argparse.Namespace) -> dict:
    config = load_run_config(args.config)
    pipeline = AnalysisPipeline(config, out_dir=args.out_dir, seed=args.seed, threads=args.threads)
    if args.command == "simulate":
        return pipeline.simulate()
    if args.command == "fit":
        pipeline.fit(resume=args.resume)
        return {"archive": str(pipeline.archive_path)}
    if args.command == "waic":
        report = pipeline.waic()
        return {"waic": report.waic, "p_waic": report.p_waic, "se": report.se}
    if args.command == "predict":
        return pipeline.predict()
    if args.command == "summarize":
        return pipeline.summarize()
    if args.command == "semivariogram":
        return pipeline.semivariogram(args.parameter, args.bins)
    table = pipeline.compare()
    return {"best": str(table["model"].iloc[0]), "compare": str(pipeline.path("compare.csv"))}


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Exit status: 0 on success, 1 with a JSON error line on stderr, 2 for usage errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.threads is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        sys.stderr.write("snowdensity: error: --threads must be at least 1\n")
        return 2

    try:
        result = run_command(args)
    except SnowDensityError as e:
        logger.error(f"{args.command} failed: {e}")
        _error_line(e.to_record())
        return 1
    except ValidationError as e:
        _error_line({"type": "ConfigError", "message": str(e)})
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        _error_line({"type": type(e).__name__, "message": str(e)})
        return 1

    sys.stdout.write(json.dumps({"command": args.command, **result}, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
