import os
import sys
import logging
from typing import Callable, Optional, Sequence, Tuple, TypeVar

from dotenv import load_dotenv

from ..errors import InputError, NumericalError

T = TypeVar("T")

_PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "../../"))


def setup_engine_environment(file_path: str) -> logging.Logger:
    """
    Sets up the environment for engines, including logging and the project .env.
    Returns a configured logger named after the engine directory.
    """
    load_dotenv(os.path.join(_PROJECT_ROOT, ".env"))

    level_name = os.getenv("SHAPEFLOW_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    return logging.getLogger(os.path.basename(os.path.dirname(file_path)))


def progress_enabled() -> bool:
    """tqdm bars only on an interactive terminal unless SHAPEFLOW_PROGRESS forces it."""
    flag = os.getenv("SHAPEFLOW_PROGRESS")
    if flag is not None:
        return flag not in ("0", "false", "False", "")
    return sys.stderr.isatty()


def run_with_fallback(
    strategies: Sequence[Tuple[str, Callable[[], T]]],
    name: str,
    logger: Optional[logging.Logger] = None,
) -> T:
    """
    Executes solver strategies in order and returns the first success.

    Input errors are raised immediately; numerical failures move on to the
    next strategy. Raises the last numerical error if all strategies fail.
    """
    if logger is None:
        logger = logging.getLogger(name)

    last_error: Optional[NumericalError] = None
    for attempt, (label, strategy) in enumerate(strategies):
        try:
            logger.debug(f"{name}: strategy {attempt + 1}/{len(strategies)} ({label})")
            return strategy()
        except InputError:
            raise
        except NumericalError as e:
            last_error = e
            if attempt < len(strategies) - 1:
                logger.warning(f"{name}: {label} failed ({e.message}); falling back")
            else:
                logger.error(f"{name}: {label} failed ({e.message}); no strategies left")
    assert last_error is not None
    raise last_error
