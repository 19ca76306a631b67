import logging
import sys


def configure_logging(level: str = "INFO", fmt: str = "%(levelname)s %(name)s: %(message)s"):
    """Install one stream handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(fmt))
    root.addHandler(handler)
    root.setLevel(level.upper())
