# Environment configuration
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

OUTPUT_DIR = Path(os.getenv("ACTIONGRAPH_OUTPUT_DIR", "runs"))

LOG_LEVEL = os.getenv("ACTIONGRAPH_LOG_LEVEL", "INFO").upper()

LOG_CONFIG = Path(
    os.getenv("ACTIONGRAPH_LOG_CONFIG", Path(__file__).with_name("logging.ini"))
)


def output_dir(subcommand: str, override=None) -> Path:
    """
    Resolve a subcommand's output directory: explicit flag first, then
    `<ACTIONGRAPH_OUTPUT_DIR>/<subcommand>`.
    """
    return Path(override) if override else OUTPUT_DIR / subcommand
