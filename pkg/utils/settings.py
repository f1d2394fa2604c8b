"""
utils/settings.py

Project paths and environment settings.

Values are read from a `.env` file at the project root (see .env.example) using
python-dotenv, then from the process environment. Every key has a default so the
project runs without a .env file.

Example:
    from utils.settings import settings, PROJECT_ROOT
    out_dir = settings.output_dir

"""

# Imports from Python Standard Library
import os
import pathlib
from dataclasses import dataclass

# Imports from external packages
from dotenv import load_dotenv

# Define global constants
PROJECT_ROOT = pathlib.Path(__file__).resolve().parent.parent
DATA_DIR: pathlib.Path = PROJECT_ROOT.joinpath("data")
TABLES_DIR: pathlib.Path = DATA_DIR.joinpath("tables")
SCENARIOS_DIR: pathlib.Path = PROJECT_ROOT.joinpath("scenarios")
ENV_FILE: pathlib.Path = PROJECT_ROOT.joinpath(".env")

load_dotenv(ENV_FILE)


def _env_int(key: str, default: int) -> int:
    raw = os.getenv(key)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"Environment variable '{key}' must be an integer, got '{raw}'.")


@dataclass(frozen=True)
class Settings:
    log_level: str
    output_dir: pathlib.Path
    base_seed: int
    workers: int
    slow_tests: bool


def load_settings() -> Settings:
    """
    Read the GOSSIPLAB_* keys.

    Returns:
        Settings: resolved values; relative output paths are anchored at the project root.
    """
    output_dir = pathlib.Path(os.getenv("GOSSIPLAB_OUTPUT_DIR", "data/runs"))
    if not output_dir.is_absolute():
        output_dir = PROJECT_ROOT.joinpath(output_dir)
    workers = _env_int("GOSSIPLAB_WORKERS", 1)
    if workers < 1:
        raise ValueError(f"GOSSIPLAB_WORKERS must be >= 1, got {workers}.")
    return Settings(
        log_level=os.getenv("GOSSIPLAB_LOG_LEVEL", "INFO").upper(),
        output_dir=output_dir,
        base_seed=_env_int("GOSSIPLAB_BASE_SEED", 1),
        workers=workers,
        slow_tests=os.getenv("GOSSIPLAB_SLOW_TESTS", "0") == "1",
    )


settings = load_settings()
