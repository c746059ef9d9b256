import logging
import os
from datetime import datetime

import config

LOGGER_NAME = "folxray"


def setup_logger(log_file=None, level=None):
    """
    Set up the shared folxray logger with console and file handlers

    Args:
        log_file: Path of the log file (default: logs/folxray_<timestamp>.log)
        level: Console level (default: INFO)

    Returns:
        logging.Logger: Configured logger
    """
    logger = logging.getLogger(LOGGER_NAME)

    # Reuse the existing handler pair unless a new file was requested
    if logger.handlers and log_file is None and level is None:
        return logger

    if log_file is None:
        os.makedirs(config.LOG_DIR, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = os.path.join(config.LOG_DIR, f"folxray_{timestamp}.log")

    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    if logger.handlers:
        for handler in list(logger.handlers):
            handler.close()
        logger.handlers.clear()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level or logging.INFO)

    file_handler = logging.FileHandler(log_file, "w", "utf-8")
    file_handler.setLevel(logging.DEBUG)

    console_formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
    file_formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    console_handler.setFormatter(console_formatter)
    file_handler.setFormatter(file_formatter)

    logger.addHandler(console_handler)
    logger.addHandler(file_handler)

    return logger


def attach_run_log(logger, run_dir):
    """
    Mirror log records into <run_dir>/run.log

    Args:
        logger: Logger returned by setup_logger
        run_dir: Run directory path

    Returns:
        logging.Handler: The attached handler (detach with logger.removeHandler)
    """
    handler = logging.FileHandler(os.path.join(run_dir, "run.log"), "w", "utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(
        logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    )
    logger.addHandler(handler)
    return handler
