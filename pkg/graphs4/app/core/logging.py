import sys
from pathlib import Path
from typing import Optional, Union

from loguru import logger

from .config import settings

LOG_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | "
    "<cyan>{name}</cyan> - <level>{message}</level>"
)


def configure_logging(
    level: Optional[str] = None,
    log_file: Optional[Union[str, Path]] = None,
    serialize: Optional[bool] = None,
) -> None:
    """Install the stderr sink and, optionally, a file sink for a run"""
    level = level or settings.LOG_LEVEL
    log_file = log_file or settings.LOG_FILE
    serialize = settings.LOG_JSON if serialize is None else serialize

    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level=level, serialize=serialize, enqueue=False)
