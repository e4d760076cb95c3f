import logging
import sys

from pythonjsonlogger import jsonlogger

from nodal_lab.config import get_settings


def setup_logging(level: int | str | None = None) -> logging.Logger:
    """Sets up structured logging for the laboratory."""
    logger = logging.getLogger("nodal_lab")

    if not logger.handlers:
        level = level or get_settings().log_level
        logger.setLevel(level)

        # JSON lines on stdout
        ch = logging.StreamHandler(sys.stdout)
        ch.setLevel(level)

        formatter = jsonlogger.JsonFormatter(
            "%(asctime)s %(name)s %(levelname)s %(message)s"
        )
        ch.setFormatter(formatter)

        logger.addHandler(ch)
        logger.propagate = False

    return logger


logger = setup_logging()
