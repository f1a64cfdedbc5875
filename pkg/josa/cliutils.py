import logging
import sys
from functools import wraps
from typing import Callable

import click

from . import logger as package_logger
from .config import ConfigError, RunConfig
from .deform import NonFiniteError
from .evaluation import IdMismatchError, TooFewSamplesError, ZeroVarianceError
from .model import DegenerateChannelError, EmptyBatchError
from .optim import DivergenceError, UnidentifiableError
from .sphere_grid import GridDimensionError, ShapeMismatchError
from .storage import ContainerError, PathMissingError, RunStorage, write_json

logger = logging.getLogger("josa.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CheckFailedError(Exception):
    pass


class GradientCheckError(CheckFailedError):
    pass


class LikelihoodCheckError(CheckFailedError):
    pass


# Checked in order; the first matching class wins.
EXIT_CODES = (
    (ConfigError, 3),
    (GridDimensionError, 3),
    (PathMissingError, 4),
    ((DivergenceError, NonFiniteError), 5),
    (
        (
            DegenerateChannelError,
            UnidentifiableError,
            EmptyBatchError,
            ZeroVarianceError,
            TooFewSamplesError,
            IdMismatchError,
            ShapeMismatchError,
        ),
        6,
    ),
    (ContainerError, 7),
    (CheckFailedError, 8),
)


def exit_code(error: Exception) -> int:
    for classes, code in EXIT_CODES:
        if isinstance(error, classes):
            return code
    return 1


def exits(fn: Callable) -> Callable:
    """Decorator for turning exceptions into process exit codes.

    Known error classes are reported as a one-line message. Anything else is
    unknown, logged with its traceback and mapped to 1.
    """

    @wraps(fn)
    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except click.exceptions.Exit:
            raise
        except Exception as e:
            code = exit_code(e)
            if code == 1:
                logger.exception(e)
            else:
                logger.error("%s: %s", type(e).__name__, e)
            click.echo(f"Error: {e}", err=True)
            sys.exit(code)

    return wrapped


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else logging.INFO
    package_logger.setLevel(level)
    # Rebind to the current stderr on every invocation.
    for handler in list(package_logger.handlers):
        if getattr(handler, "_josa_console", False):
            package_logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._josa_console = True
    package_logger.addHandler(handler)


def open_run(directory: str, cfg: RunConfig, command: str) -> RunStorage:
    """Create the run directory, attach its log file and echo the config."""
    storage = RunStorage(directory, create=True)
    for handler in list(package_logger.handlers):
        if isinstance(handler, logging.FileHandler):
            package_logger.removeHandler(handler)
            handler.close()
    handler = logging.FileHandler(storage.path("josa.log"))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    write_json(storage.path("config.json"), {"command": command, **cfg.to_dict()})
    logger.info("%s: writing to %s (seed %d)", command, directory, cfg.seed)
    return storage
