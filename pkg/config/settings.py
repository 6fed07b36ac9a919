import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name, default):
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Settings:
    # Paths
    DATA_DIR = os.getenv('DATA_DIR', 'data/raw/')
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'data/runs/')
    LOG_DIR = os.getenv('LOG_DIR', 'data/logs/')

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_TO_FILE = _flag('LOG_TO_FILE', 'true')

    # Numerics: float64 keeps finite-difference oracles tight, float32 is the fast mode
    DTYPE = os.getenv('DTYPE', 'float64')

    # Runtime
    SHOW_PROGRESS = _flag('SHOW_PROGRESS', 'true')
    MAX_WORKERS = int(os.getenv('MAX_WORKERS', '4'))

settings = Settings()
