"""
personafed command line: generate a dataset, pre-train the frozen encoder,
run an experiment preset, print a report, or check gradients.
"""
import argparse
import asyncio
import sys
from dataclasses import replace
from pathlib import Path

import experiments
from app_create import configure_logging, create_config, create_settings
from error_handlers import EXIT_OK, EXIT_UNEXPECTED, handle_cli_error

DEFAULT_GRADCHECK_TOLERANCE = 1e-4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="personafed",
        description="Federated personalized representation learning simulator.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(command):
        command.add_argument("--config", type=Path, help="YAML experiment configuration")
        return command

    generate = with_config(commands.add_parser("generate", help="write a synthetic dataset"))
    generate.add_argument("--out", type=Path, help="dataset path (JSON lines)")
    generate.add_argument("--seed", type=int, help="universe seed")

    pretrain = with_config(commands.add_parser("pretrain", help="pre-train and save the frozen encoder"))
    pretrain.add_argument("--dataset", help="dataset to pre-train on (default: generate one)")
    pretrain.add_argument("--out", type=Path, help="parameter path prefix (.bin and .json)")

    run = with_config(commands.add_parser("run", help="run an experiment preset"))
    run.add_argument("--preset", choices=experiments.PRESETS)
    run.add_argument("--output", help="output directory (overrides PERSONAFED_OUTPUT_ROOT)")
    run.add_argument("--dataset", help="use this dataset instead of generating one per seed")
    run.add_argument("--parallelism", type=int, help="worker threads for client training")
    run.add_argument("--seeds", type=int, nargs="+", help="experiment seeds")
    run.add_argument("--dry-run", action="store_true", help="validate and print the plan only")

    report = commands.add_parser("report", help="print the summary table of a run directory")
    report.add_argument("artifact_dir", type=Path)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check every loss")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--points", type=int, default=experiments.DEFAULT_GRADCHECK_POINTS)
    gradcheck.add_argument("--tolerance", type=float, default=DEFAULT_GRADCHECK_TOLERANCE)
    return parser


def _config_path(args, settings):
    if getattr(args, "config", None) is not None:
        return args.config
    return settings.config_path if settings.config_path.is_file() else None


def _run(args, settings) -> int:
    path = _config_path(args, settings)
    if args.command == "report":
        print(experiments.report(args.artifact_dir))
        return EXIT_OK

    if args.command == "gradcheck":
        worst = experiments.run_gradient_checks(args.seed, args.points)
        for name, error in worst.items():
            status = "ok" if error < args.tolerance else "FAILED"
            print(f"{name:<16}{error:.3e}  {status}")
        return EXIT_OK if max(worst.values()) < args.tolerance else EXIT_UNEXPECTED

    if args.command == "generate":
        config = create_config(path, settings)
        if args.seed is not None:
            config = replace(config, universe=replace(config.universe, seed=args.seed))
        out = args.out or Path(config.output_dir) / "dataset.jsonl"
        print(experiments.generate_dataset(config, out))
        return EXIT_OK

    if args.command == "pretrain":
        config = create_config(path, settings, {"dataset": args.dataset})
        out = args.out or Path(config.output_dir) / "pretrained"
        binary, sidecar = experiments.pretrain_encoder(config, out)
        print(binary)
        print(sidecar)
        return EXIT_OK

    overrides = {
        "preset": args.preset,
        "output_dir": args.output,
        "dataset": args.dataset,
        "parallelism": args.parallelism,
    }
    config = create_config(path, settings, overrides)
    if args.seeds:
        config = replace(config, presets=replace(config.presets, seeds=tuple(args.seeds)))
    if args.dry_run:
        print(experiments.dry_run_plan(config))
        print("---")
        print(experiments.dump_config(config), end="")
        return EXIT_OK
    run_dir = asyncio.run(experiments.run_preset(config))
    print(experiments.report(run_dir))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = create_settings()
    except ValueError as error:
        print(f"error: invalid environment: {error}", file=sys.stderr)
        return 2
    configure_logging(settings)
    try:
        return _run(args, settings)
    except Exception as error:  # pylint: disable=broad-except
        return handle_cli_error(error, settings.generic_error)


if __name__ == "__main__":
    sys.exit(main())
