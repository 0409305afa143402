"""Ingestion utilities for ddgan: config files and sample CSVs."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import ValidationError

from .models import TrainConfig

CONFIG_SUFFIXES = {".cfg", ".env"}


class UnsupportedFileError(ValueError):
    """Raised when file type is unsupported."""


class ConfigFileError(ValueError):
    """Raised when a config file has unknown keys or values of the wrong type."""


def load_config_values(path: str | Path) -> Dict[str, str]:
    """Read KEY=VALUE lines from a .cfg or .env file."""
    file_path = Path(path)
    if file_path.suffix.lower() not in CONFIG_SUFFIXES:
        raise UnsupportedFileError("Only .cfg and .env config files are supported.")
    if not file_path.is_file():
        raise ConfigFileError(f"Config file '{file_path}' does not exist.")
    values = dotenv_values(file_path, interpolate=False)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigFileError(f"{file_path}: keys without a value: {', '.join(missing)}")
    return dict(values)


def build_train_config(values: Dict[str, Any], source: str = "config") -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigFileError(f"{source}: {problems}") from exc


def load_train_config(path: Optional[str | Path] = None, **overrides: Any) -> TrainConfig:
    """TrainConfig from an optional file, with keyword overrides applied last.

    Args:
        path: KEY=VALUE file; every key must be a TrainConfig field.
        overrides: values that win over the file (None values are ignored).
    """
    values: Dict[str, Any] = load_config_values(path) if path is not None else {}
    values.update({key: value for key, value in overrides.items() if value is not None})
    return build_train_config(values, source=str(path) if path is not None else "config")


def load_samples(path: str | Path) -> np.ndarray:
    """Samples CSV as written by `ddgan sample`: a header row, one sample per row."""
    file_path = Path(path)
    if file_path.suffix.lower() != ".csv":
        raise UnsupportedFileError("Only .csv sample files are supported.")
    frame = pd.read_csv(file_path)
    if frame.empty:
        raise ConfigFileError(f"{file_path} holds no samples.")
    return frame.to_numpy(dtype=np.float64)
