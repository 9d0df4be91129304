"""
Configuration management for the fusion toolkit.
Loads settings from environment variables with validation.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

from utils.logger import LEVELS

# Load environment variables
load_dotenv()


class Config:
    """Application configuration"""

    # Base paths
    BASE_DIR = Path(__file__).parent
    DOCS_DIR = BASE_DIR / "docs"
    PRESETS_DIR = DOCS_DIR / "presets"
    MANIFESTS_DIR = DOCS_DIR / "manifests"

    # Output root for every command
    OUT_DIR = Path(os.getenv("NIMF_OUT_DIR", "runs"))

    # Run defaults
    FUSION_SAMPLES = os.getenv("NIMF_FUSION_SAMPLES", "400")
    SEED = os.getenv("NIMF_SEED", "0")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    @classmethod
    def validate(cls):
        """Validate configuration values"""
        problems = []

        if not str(cls.FUSION_SAMPLES).isdigit() or int(cls.FUSION_SAMPLES) < 1:
            problems.append(f"NIMF_FUSION_SAMPLES must be a positive integer, got {cls.FUSION_SAMPLES!r}")
        if not str(cls.SEED).lstrip("-").isdigit():
            problems.append(f"NIMF_SEED must be an integer, got {cls.SEED!r}")
        if str(cls.LOG_LEVEL).upper() not in LEVELS:
            problems.append(f"LOG_LEVEL must be one of {', '.join(LEVELS)}, got {cls.LOG_LEVEL!r}")

        if problems:
            raise ValueError(
                "Invalid configuration: " + "; ".join(problems) + ". Please check your .env file."
            )

        return True

    @classmethod
    def fusion_samples(cls) -> int:
        """Default number of fusion samples"""
        return int(cls.FUSION_SAMPLES)

    @classmethod
    def seed(cls) -> int:
        """Default seed when a command is given none"""
        return int(cls.SEED)

    @classmethod
    def out_dir(cls) -> Path:
        """Output root, re-read so NIMF_OUT_DIR set after import still applies"""
        return Path(os.getenv("NIMF_OUT_DIR", str(cls.OUT_DIR)))
