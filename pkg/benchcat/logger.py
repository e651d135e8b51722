"""Set up a logger to be used by any module of benchcat."""
import logging
import sys
from logging.handlers import TimedRotatingFileHandler


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(name="benchcat"):
    """Initialize a logger that writes to standard error.

    Data never goes through the logger; commands write data to files only.
    """
    logger_instance = logging.getLogger(name)
    logger_instance.setLevel(logging.DEBUG)

    if not logger_instance.handlers:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger_instance.addHandler(console_handler)

    return logger_instance


def add_file_handler(log_file_name, logger_instance=None):
    """Additionally write log records to a daily rotating file."""
    logger_instance = logger_instance or logger
    handler = TimedRotatingFileHandler(
        filename=log_file_name, when="D", interval=1, backupCount=14
    )
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger_instance.addHandler(handler)
    return handler


def set_verbosity(level):
    """Set the level of the console handlers (e.g. logging.DEBUG)."""
    for handler in logger.handlers:
        if not isinstance(handler, TimedRotatingFileHandler):
            handler.setLevel(level)


logger = setup_logger()
