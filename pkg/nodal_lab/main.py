import argparse
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from nodal_lab.errors import ConfigError, NodalLabError
from nodal_lab.logger import logger
from nodal_lab.schemas import Command, RunConfig
from nodal_lab.service import dispatch, write_error

# flag name -> RunConfig field
OVERRIDES = {
    "resolution": "resolution",
    "seed": "seed",
    "samples": "samples",
    "output_dir": "output_dir",
    "format": "format",
    "n_jobs": "n_jobs",
    "delta": "delta",
    "segments": "segments",
    "quadrature_resolution": "quadrature_resolution",
    "mc_samples": "mc_samples",
}


def parse_config(
    path: Optional[str | Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Reads a TOML run configuration, applies flag overrides on top and
    validates the result. Missing fields take their defaults.
    """
    document: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "cli", "parse_config")
        try:
            document = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}", "cli", "parse_config")
    document.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"invalid field '{where}': {first['msg']}", "cli", "parse_config")
    logger.debug("Resolved run configuration", extra={"config": config.model_dump(mode="json")})
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodal-lab",
        description="Nodal sets of Gaussian random fields: volumes, variations, Kac-Rice moments, Morse profiles and laws.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in Command:
        p = sub.add_parser(command.value)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--resolution", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--samples", type=int, help="ensemble size")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--format", choices=["json", "csv"])
        p.add_argument("--n-jobs", dest="n_jobs", type=int)
        p.add_argument("--delta", type=float, help="tube radius for two-point quadratures")
        p.add_argument("--segments", type=int)
        p.add_argument("--quadrature-resolution", dest="quadrature_resolution", type=int)
        p.add_argument("--mc-samples", dest="mc_samples", type=int)
        if command == Command.VARIATION:
            p.add_argument("--fd", action="store_true", help="add the finite-difference oracle")
        if command == Command.KACRICE:
            p.add_argument(
                "--derivative", action="store_true", help="also estimate E|dV|^2"
            )
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {field: getattr(args, flag) for flag, field in OVERRIDES.items()}
    overrides["command"] = args.command
    if getattr(args, "fd", False):
        overrides["fd"] = True
    if getattr(args, "derivative", False):
        overrides["derivative"] = True

    config = None
    try:
        config = parse_config(args.config, overrides)
        path = dispatch(config)
    except NodalLabError as e:
        logger.error(e.message, extra={"error_record": e.to_record()})
        write_error(config, e, args.output_dir)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Internal error in {args.command}: {e}")
        err = NodalLabError(str(e), "cli", "dispatch")
        write_error(config, err, args.output_dir)
        return err.exit_code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(run())
