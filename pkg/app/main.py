"""
oseen-lab command-line entry point.

    oseen-lab <subcommand> [--config FILE] [--key value ...]

Exit codes: 0 all selected checks pass, 1 study failure, 2 usage or config
error, 3 internal numerical failure. Errors are printed to stdout as JSON;
logs go to stderr.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from app.core.exceptions import ConfigError, OseenLabError, StudyFailure
from app.repositories.artifact_repo import ArtifactRepository
from app.router import COMMANDS
from app.schemas.run_config import load_run_config
from app_logging.logger import get_logger
from config.settings import settings

logger = get_logger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors through the error document."""

    def error(self, message: str):
        raise ConfigError(message, {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oseen-lab", description="Truncated exterior rotating Oseen flow studies", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"{settings.APP_NAME} {settings.VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for cmd in COMMANDS.values():
        child = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help, allow_abbrev=False)
        child.add_argument("--config", type=Path, default=None, help="run configuration file (key = value)")
    return parser


def _emit_error(exc: OseenLabError) -> int:
    print(json.dumps(exc.to_dict(), sort_keys=True, default=str))
    return exc.exit_code


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse, dispatch and map every failure to its exit code.

    This is the single global exception handler of the CLI.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, overrides = build_parser().parse_known_args(argv)
        run_config = load_run_config(args.config, overrides)
        repo = ArtifactRepository(Path(run_config.output_dir))

        logger.info("command_started", command=args.command, output_dir=run_config.output_dir)
        studies = COMMANDS[args.command].handler(run_config, repo)

        failing: List[str] = [f"{s.name}.{c.name}" for s in studies for c in s.criteria if not c.passed]
        if failing:
            raise StudyFailure("acceptance criteria not met", {"failing": failing})
        logger.info("command_completed", command=args.command, studies=len(studies))
        return 0

    except StudyFailure as exc:
        logger.warning("study_failed", failing=exc.details.get("failing"))
        return _emit_error(exc)
    except OseenLabError as exc:
        logger.error("command_failed", error_type=exc.error_type, error=exc.message)
        return _emit_error(exc)
    except ValidationError as exc:
        logger.error("validation_failed", error=str(exc))
        return _emit_error(ConfigError("invalid value", {"errors": [e["msg"] for e in exc.errors()]}))
    except Exception as exc:
        logger.error("unhandled_exception", error_type=type(exc).__name__, error=str(exc), exc_info=True)
        return _emit_error(OseenLabError(str(exc), {"type": type(exc).__name__}))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
