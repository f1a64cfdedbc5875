import logging

logger = logging.getLogger("josa")
logger.addHandler(logging.NullHandler())

__version__ = "0.1.0"
