import logging
import os

from dotenv import load_dotenv

LOGGER_NAME = "zoom_control"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def read_logging_config():
    """Return (level, file path) from the environment, after loading an optional .env file.

    Only logging is configured this way. Scenario parameters never come from the
    environment so that artifacts depend on the scenario file and flags alone.
    """
    load_dotenv()

    level_name = os.getenv("LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.INFO
    log_file = os.getenv("LOG_FILE", "zoom_control.log")
    return level, log_file or None


# Console and file logging for the whole zoom_control logger family.
# Library modules only call get_logger(); handlers are attached once, here.
def setup_logging(level=None, log_file=None):
    env_level, env_file = read_logging_config()
    level = env_level if level is None else level
    log_file = env_file if log_file is None else log_file

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    logger.propagate = False

    if logger.hasHandlers():
        for handler in list(logger.handlers):
            handler.close()
        logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(module_name):
    return logging.getLogger(f"{LOGGER_NAME}.{module_name}")
