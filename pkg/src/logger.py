from contextlib import contextmanager
from datetime import datetime
import logging
import os

from config.settings import settings
from src.utils import ensure_dir

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RUN_LOG = 'run.log'


def _handler(handler, level):
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    return handler


def setup_logger(name='gradinit'):
    """Console at LOG_LEVEL, plus a timestamped DEBUG file under LOG_DIR when LOG_TO_FILE"""
    log = logging.getLogger(name)
    if log.handlers:
        return log
    log.setLevel(logging.DEBUG)
    log.propagate = False

    if settings.LOG_TO_FILE:
        ensure_dir(settings.LOG_DIR)
        path = os.path.join(settings.LOG_DIR, f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")
        log.addHandler(_handler(logging.FileHandler(path), logging.DEBUG))
    level = getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    log.addHandler(_handler(logging.StreamHandler(), level))
    return log


@contextmanager
def run_log(run_dir, log=None):
    """Copy every record emitted inside the block to ``<run_dir>/run.log``"""
    log = log or logger
    ensure_dir(run_dir)
    handler = _handler(logging.FileHandler(os.path.join(run_dir, RUN_LOG)), logging.DEBUG)
    log.addHandler(handler)
    try:
        yield handler.baseFilename
    finally:
        log.removeHandler(handler)
        handler.close()


logger = setup_logger()
