"""Command line: ``python -m app <subcommand> --config run.conf``.

Exit codes: 0 success, 1 internal failure (I/O, memory, bugs),
2 configuration error, 3 numerical failure, 4 validation failure.
Failures also leave ``error.json`` in the output directory when it is
writable.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from app.config import WORKERS_ENV, get_config
from app.services.errors import DickeError
from app.services.run_config import ConfigError, parse_config
from app.services.runner import COMMANDS, run
from app.services.validation import ValidationFailure
from app.utils.output import write_error

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app", description="Open Dicke model solvers")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="run configuration file")
    parser.add_argument("--out", type=Path, help="output directory (default: output.dir of the config)")
    parser.add_argument("--seed", type=int, help="base seed, overrides the config")
    parser.add_argument("--workers", type=int, help=f"worker processes (default: config, then ${WORKERS_ENV})")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="replace a config entry; repeatable")
    parser.add_argument("--log-level", help="logging level (default from config.ini)")
    return parser


def _exit_code(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, ValidationFailure):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def _record_error(out_dir: Path | None, error: BaseException, code: int) -> None:
    try:
        write_error(out_dir or Path("output"), error, code)
    except OSError as e:
        logger.error("Cannot write error record to %s: %s", out_dir, e)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_config().log_level).upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    if args.workers is not None and args.workers < 1:
        args.workers = None
        logger.warning("Ignoring --workers below 1")

    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    out_dir = args.out

    try:
        try:
            text = args.config.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError([f"cannot read {args.config}: {e}"]) from e
        cfg = parse_config(text, overrides)
        out_dir = out_dir or Path(cfg.output_dir)
        result = run(cfg, args.command, workers=args.workers, out_dir=out_dir)
    except (DickeError, ArithmeticError, ValueError, RuntimeError) as e:
        code = _exit_code(e)
        logger.error("%s failed: %s", args.command, e, exc_info=not isinstance(e, ConfigError))
        _record_error(out_dir, e, code)
        return code
    except Exception as e:
        logger.error("%s failed unexpectedly: %s", args.command, e, exc_info=True)
        _record_error(out_dir, e, EXIT_INTERNAL)
        return EXIT_INTERNAL

    print(json.dumps(result.summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
