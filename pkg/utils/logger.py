"""
Logger Setup Script
File: utils/logger.py

Loguru configuration shared by the library, the CLI and the scripts. Messages go to
logs/project_log.log and to stderr; the level is taken from GOSSIPLAB_LOG_LEVEL.

Simulator message handlers do not log. They write to the world's structured event log.
"""

# Imports from Python Standard Library
import pathlib
import sys

# Imports from external packages
from loguru import logger

# Imports from local modules
from utils.settings import PROJECT_ROOT, settings

# Define global constants
CURRENT_SCRIPT = pathlib.Path(__file__).stem
LOG_FOLDER: pathlib.Path = PROJECT_ROOT.joinpath("logs")
LOG_FILE: pathlib.Path = LOG_FOLDER.joinpath("project_log.log")

# Ensure the log folder exists or create it
LOG_FOLDER.mkdir(exist_ok=True)

# Replace loguru's default handler so the configured level applies to the console too
logger.remove()
logger.add(LOG_FILE, level=settings.log_level, enqueue=True)
logger.add(sys.stderr, level=settings.log_level)


def set_console_level(level: str) -> None:
    """Reconfigure both sinks, used by the CLI --log-level flag."""
    logger.remove()
    logger.add(LOG_FILE, level=level.upper(), enqueue=True)
    logger.add(sys.stderr, level=level.upper())
    logger.debug(f"Log level set to {level.upper()}")


def main() -> None:
    logger.info(f"STARTING {CURRENT_SCRIPT}.py")
    logger.info(f"Log level {settings.log_level}, view the log output at {LOG_FILE}")
    logger.info(f"EXITING {CURRENT_SCRIPT}.py.")


# Conditional execution block that calls main() only when this file is executed directly
if __name__ == "__main__":
    main()
