import logging

LOGGING_LEVELS = ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG")


def validate_environment_settings(OUTPUT_ROOT, CONFIG_PATH, PARALLELISM, LOGGING_LEVEL):
    """
    Validate the environment settings required for the application.


    Args:
    - OUTPUT_ROOT (Path or None): Directory that replaces the configured output_dir.
    - CONFIG_PATH (Path): Default experiment configuration file; may be absent.
    - PARALLELISM (str or None): Worker thread count for client training.
    - LOGGING_LEVEL (str): Name of a standard logging level.

    Returns:
    - True if all validations pass.

    Raises:
    - ValueError: If any of the provided settings are invalid.
    """

    # Check the output root
    if OUTPUT_ROOT is not None and OUTPUT_ROOT.exists() and not OUTPUT_ROOT.is_dir():
        raise ValueError(
            f"The specified output root {OUTPUT_ROOT} exists and is not a directory."
        )

    # Check the default configuration file
    if CONFIG_PATH.is_dir():
        raise ValueError(
            f"The specified configuration file {CONFIG_PATH} is a directory."
        )

    # Check the worker count
    if PARALLELISM is not None and PARALLELISM != "":
        if not str(PARALLELISM).isdigit() or int(PARALLELISM) < 1:
            raise ValueError(
                f"PERSONAFED_PARALLELISM must be a positive integer, got {PARALLELISM!r}."
            )

    if LOGGING_LEVEL not in LOGGING_LEVELS:
        raise ValueError(
            f"PERSONAFED_LOGGING_LEVEL must be one of {', '.join(LOGGING_LEVELS)}, "
            f"got {LOGGING_LEVEL!r}."
        )

    logging.debug("Environment settings validated")
    return True
