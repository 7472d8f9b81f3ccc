"""Command-line front end.

Subcommands map one-to-one onto the runner entry points; the only logic
here is flag parsing and the exception-to-exit-code contract (0 ok,
2 configuration error, 3 numerical abort).
"""

import argparse
import os
import sys
from pathlib import Path

import yaml

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hegqmc",
        description="Quantum Monte Carlo for the homogeneous electron gas",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, needs_config: bool = True):
        p.add_argument("--config", required=needs_config, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--threads", type=int, default=None, help="cap the XLA CPU thread pool"
        )
        p.add_argument("--resume", default=None, help="checkpoint to continue from")
        p.add_argument("--output", default=None, help="artifact directory")
        p.add_argument(
            "--force",
            action="store_true",
            help="resume even if the checkpoint was written by a different config",
        )

    add_common(sub.add_parser("vmc", help="optimize a wavefunction, then measure"))
    add_common(sub.add_parser("dmc", help="fixed-node projection from a trial state"))
    add_common(
        sub.add_parser(
            "measure", help="observables from a checkpoint without optimizing"
        )
    )
    validate = sub.add_parser("validate", help="parse a config and echo the defaults")
    validate.add_argument("--config", required=True, help="YAML config file")

    serve = sub.add_parser("serve", help="run the HTTP job service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument(
        "--output", default=None, help="root directory for job artifacts"
    )
    return parser


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    # must land in the environment before the first jax computation
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = (
        f"{flags} --xla_cpu_multi_thread_eigen=false"
        f" intra_op_parallelism_threads={n}"
    ).strip()
    os.environ.setdefault("OMP_NUM_THREADS", str(n))


def _load(args) -> "ExperimentConfig":
    from .config import load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides=overrides)


def _output_dir(args) -> Path:
    if args.output is not None:
        return Path(args.output)
    return Path(Path(args.config).stem + "_out")


def _cmd_vmc(args) -> int:
    from .runner import run_vmc

    run_vmc(
        _load(args),
        _output_dir(args),
        resume=args.resume,
        force_resume=args.force,
    )
    return EXIT_OK


def _cmd_dmc(args) -> int:
    from .runner import run_dmc

    run_dmc(
        _load(args),
        _output_dir(args),
        resume=args.resume,
        force_resume=args.force,
    )
    return EXIT_OK


def _cmd_measure(args) -> int:
    from .errors import ConfigurationError
    from .runner import run_measure

    if args.resume is None:
        raise ConfigurationError("measure needs --resume CHECKPOINT")
    run_measure(_load(args), args.resume, _output_dir(args), force=args.force)
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .config import load_config
    from .sr import learning_rate_with_warning

    config = load_config(args.config)
    print(yaml.safe_dump(config.resolved(), sort_keys=True), end="")
    eta = config.optimizer.learning_rate
    if eta is None:
        eta, note = learning_rate_with_warning(config.system.rs)
        if note is not None:
            print(f"warning: {note}", file=sys.stderr)
    print(f"learning rate: {eta:g}")
    print(f"config hash: {config.config_hash()}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    from .service.app import DEFAULT_OUTPUT_ROOT

    app = create_app(args.output or DEFAULT_OUTPUT_ROOT)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


_COMMANDS = {
    "vmc": _cmd_vmc,
    "dmc": _cmd_dmc,
    "measure": _cmd_measure,
    "validate": _cmd_validate,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))

    from .errors import (
        ConfigurationError,
        NumericalAbortError,
        PopulationExtinctionError,
    )

    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbortError, PopulationExtinctionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
