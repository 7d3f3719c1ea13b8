import logging
import sys

from pythonjsonlogger import jsonlogger

from src.editlab.core.config import LoggingSection

JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def configure_logging(section: LoggingSection) -> logging.Handler:
    """
    Route all package logs to stderr.

    JSON records are emitted when `logging.json` is set, otherwise the plain
    format string of the configuration file is used.
    """
    handler = logging.StreamHandler(sys.stderr)
    if section.json_output:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(section.format))

    root = logging.getLogger()
    for existing in list(root.handlers):
        if getattr(existing, "_editlab", False):
            root.removeHandler(existing)
    handler._editlab = True
    root.addHandler(handler)
    root.setLevel(section.level)
    return handler
