"""Configuration utilities for ddgan."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv
from rich.logging import RichHandler

load_dotenv()

SUPPORTED_DTYPES = {"float64", "float32"}


class ConfigError(RuntimeError):
    """Raised when an environment setting is unusable."""


@dataclass
class Config:
    """Runtime configuration for the app. Nothing here changes experiment results."""

    output_dir: str = os.getenv("DDGAN_OUTPUT_DIR", "outputs")
    log_level: str = os.getenv("DDGAN_LOG_LEVEL", "INFO").upper()
    progress: bool = os.getenv("DDGAN_PROGRESS", "true").lower() == "true"
    dtype: str = os.getenv("DDGAN_DTYPE", "float64")

    def ensure_dtype(self) -> str:
        if self.dtype not in SUPPORTED_DTYPES:
            raise ConfigError(f"DDGAN_DTYPE must be one of {sorted(SUPPORTED_DTYPES)}, got '{self.dtype}'.")
        return self.dtype


DEFAULT_CONFIG = Config()


def resolve_output_dir(path: str | Path) -> Path:
    """Ensure output directory exists and return Path."""
    output_dir = Path(path)
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def configure_logging(level: str | None = None) -> None:
    """Route library logs through rich; safe to call more than once."""
    logging.basicConfig(
        level=(level or DEFAULT_CONFIG.log_level),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=False, show_path=False)],
        force=True,
    )
