import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger("app")


def configure_logging(level: str | int = "INFO") -> logging.Logger:
    handler = next((h for h in logger.handlers if getattr(h, "_ancilla", False)), None)
    if handler is None:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._ancilla = True
        logger.addHandler(handler)
    else:
        # stderr may have been swapped since the handler was attached
        handler.setStream(sys.stderr)
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    return logger
