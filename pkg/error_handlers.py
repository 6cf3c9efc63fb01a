import logging
import sys

from app_create import ConfigError
from client import TrainingDivergedError
from datagen import DatagenError
from encoders import ParamsFormatError
from experiments import ArtifactMissingError, ExperimentError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING_ARTIFACT = 4


def handle_cli_error(error: BaseException, generic_error: str, stream=None) -> int:
    """Report a failed command on stderr and return its exit status."""
    stream = stream or sys.stderr
    if isinstance(error, ArtifactMissingError):
        print(f"error: {error}", file=stream)
        return EXIT_MISSING_ARTIFACT
    if isinstance(error, TrainingDivergedError):
        print(f"error: training diverged, partial artifacts kept: {error}", file=stream)
        return EXIT_DIVERGED
    if isinstance(error, (ConfigError, ExperimentError, DatagenError, ParamsFormatError, ValueError)):
        print(f"error: invalid input: {error}", file=stream)
        return EXIT_INVALID_CONFIG
    logging.exception("Unexpected error occurred: %s", error)
    print(generic_error, file=stream)
    return EXIT_UNEXPECTED
