import logging
from logging.config import fileConfig

from . import settings


def configure_logging(verbosity: int = 0) -> None:
    """
    Apply the ini logging configuration, then shift the package level.

    verbosity > 0 lowers the level (DEBUG), verbosity < 0 raises it (WARNING).
    """
    if settings.LOG_CONFIG.exists():
        fileConfig(str(settings.LOG_CONFIG), disable_existing_loggers=False)
    else:
        logging.basicConfig(format="%(levelname)-5.5s [%(name)s] %(message)s")

    level = logging.getLevelName(settings.LOG_LEVEL)
    if not isinstance(level, int):
        level = logging.INFO
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    logging.getLogger("actiongraph").setLevel(level)
