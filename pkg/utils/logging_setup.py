# utils/logging_setup.py
import logging
import os

import colorlog

from utils import constants

LOG_DIRECTORY = os.path.join(constants.APP_USER_DATA_DIR, "logs")


def setup_logging(level=None, log_directory=None, log_to_file=True):
    """Configures the root logger for the application."""
    level = constants.ACTIVE_LOG_LEVEL if level is None else level
    log_directory = log_directory or LOG_DIRECTORY

    logger = logging.getLogger()
    logger.setLevel(level)

    # Clear existing handlers (avoids duplicate lines when commands run in-process, e.g. under CliRunner)
    if logger.hasHandlers():
        logger.handlers.clear()

    console_handler = colorlog.StreamHandler()
    console_handler.setFormatter(colorlog.ColoredFormatter(
        constants.COLOR_LOG_FORMAT,
        datefmt=constants.LOG_DATE_FORMAT,
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        },
    ))
    logger.addHandler(console_handler)

    # Third-party libraries that are chatty at DEBUG
    logging.getLogger('numexpr').setLevel(logging.WARNING)

    if not log_to_file:
        logging.info("Logging configured. Console handler active. File logging disabled.")
        return None

    log_file_path = os.path.join(log_directory, constants.LOG_FILE_NAME)
    try:
        os.makedirs(log_directory, exist_ok=True)
        # mode 'w' resets the log on each session
        file_handler = logging.FileHandler(log_file_path, mode='w', encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(constants.LOG_FORMAT, datefmt=constants.LOG_DATE_FORMAT))
        logger.addHandler(file_handler)
        initial_log_message = f"Logging configured. Console and File handlers active. Log file: {log_file_path}"
    except OSError as e:
        log_file_path = None
        initial_log_message = f"Logging configured. Console handler active. FILE LOGGING FAILED for {log_directory}: {e}"

    logging.info(initial_log_message)
    return log_file_path
