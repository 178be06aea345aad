import logging
from typing import Optional

from rich.logging import RichHandler

from . import settings

LOG_FORMAT = "%(name)s - %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure the root logger for command-line use.

    Args:
        level: Log level name; defaults to ``CLTESTBED_LOG_LEVEL``.
    """
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format=LOG_FORMAT,
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )
