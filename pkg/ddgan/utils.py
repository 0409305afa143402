"""Misc helpers."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Union

import pandas as pd
from pydantic import BaseModel


def save_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")


def save_csv(rows: Union[pd.DataFrame, Iterable[Mapping]], path: Path) -> Path:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: BaseModel) -> str:
    """KEY=VALUE text, one line per field, readable back by ingest.load_train_config."""
    lines = [f"{key}={_render_value(value)}" for key, value in config.model_dump().items()]
    return "\n".join(lines) + "\n"


def write_config(config: BaseModel, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(config), encoding="utf-8")
    return path
