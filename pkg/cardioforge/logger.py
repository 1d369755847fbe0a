import logging

from cardioforge.load_cfg import LOG_FILE, LOG_LEVEL

# Configure logging
def setup_logger(log_file: str = LOG_FILE, console_level: str = LOG_LEVEL) -> logging.Logger:
    """
    Configure the package logger with a file handler and a console handler.

    Library modules log through ``logging.getLogger(__name__)`` and inherit
    these handlers, so entry points only need to call this once. Calling it
    again reuses the existing handlers.

    Args:
        log_file (str): Path of the DEBUG-level log file.
        console_level (str): Level name for the console handler.

    Returns:
        logging.Logger: The ``cardioforge`` logger.
    """
    logger = logging.getLogger("cardioforge")
    logger.setLevel(logging.DEBUG)
    if getattr(logger, "_cardioforge_configured", False):
        return logger

    # File handler
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG)

    # Console handler (stderr, so stdout stays machine-readable)
    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, console_level.upper(), logging.INFO))

    # Formatter
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    # Add handlers
    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    logger._cardioforge_configured = True

    return logger
