"""Versioned checkpoint container.

A checkpoint is a single ``.npz`` archive (loaded with ``allow_pickle=False``):

    meta                 0-d unicode array holding JSON: format version, data
                         dimension, iteration, config echo, RNG state, optimizer
                         step counters and the parameter index (names, shapes)
    generator/<name>     generator parameter arrays
    discriminator/<name> discriminator parameter arrays
    ema/<name>           EMA generator arrays (absent when EMA is off)
    opt_g/m/<i>, opt_g/v/<i>, opt_d/m/<i>, opt_d/v/<i>
                         Adam moment arrays, in parameter order
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .models import TrainConfig

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is missing, malformed or of another version."""


@dataclass
class Checkpoint:
    config: TrainConfig
    data_dim: int
    iteration: int
    generator: Dict[str, np.ndarray]
    discriminator: Dict[str, np.ndarray]
    ema: Optional[Dict[str, np.ndarray]] = None
    rng_state: dict = field(default_factory=dict)
    optimizer_g: Optional[dict] = None
    optimizer_d: Optional[dict] = None


def _index(arrays: Optional[Dict[str, np.ndarray]]) -> Optional[List[dict]]:
    if arrays is None:
        return None
    return [{"name": name, "shape": list(value.shape)} for name, value in arrays.items()]


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    for prefix, group in (("generator", ckpt.generator), ("discriminator", ckpt.discriminator), ("ema", ckpt.ema)):
        for name, value in (group or {}).items():
            arrays[f"{prefix}/{name}"] = value
    optimizer_steps = {}
    for prefix, state in (("opt_g", ckpt.optimizer_g), ("opt_d", ckpt.optimizer_d)):
        if state is None:
            continue
        optimizer_steps[prefix] = int(state["steps"])
        for moment in ("m", "v"):
            for i, value in enumerate(state[moment]):
                arrays[f"{prefix}/{moment}/{i}"] = value
    meta = {
        "format_version": FORMAT_VERSION,
        "data_dim": ckpt.data_dim,
        "iteration": ckpt.iteration,
        "config": ckpt.config.model_dump(),
        "rng_state": ckpt.rng_state,
        "optimizer_steps": optimizer_steps,
        "index": {
            "generator": _index(ckpt.generator),
            "discriminator": _index(ckpt.discriminator),
            "ema": _index(ckpt.ema),
        },
    }
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint '{path}' does not exist.")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {exc}") from exc
    with archive:
        if "meta" not in archive.files:
            raise CheckpointError(f"'{path}' is not a ddgan checkpoint.")
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {meta.get('format_version')!r}.")

        def group(prefix: str) -> Optional[Dict[str, np.ndarray]]:
            entries = meta["index"][prefix]
            if entries is None:
                return None
            return {e["name"]: archive[f"{prefix}/{e['name']}"] for e in entries}

        def optimizer(prefix: str) -> Optional[dict]:
            if prefix not in meta["optimizer_steps"]:
                return None
            count = len(meta["index"]["generator" if prefix == "opt_g" else "discriminator"])
            return {
                "steps": meta["optimizer_steps"][prefix],
                "m": [archive[f"{prefix}/m/{i}"] for i in range(count)],
                "v": [archive[f"{prefix}/v/{i}"] for i in range(count)],
            }

        return Checkpoint(
            config=TrainConfig(**meta["config"]),
            data_dim=int(meta["data_dim"]),
            iteration=int(meta["iteration"]),
            generator=group("generator"),
            discriminator=group("discriminator"),
            ema=group("ema"),
            rng_state=meta["rng_state"],
            optimizer_g=optimizer("opt_g"),
            optimizer_d=optimizer("opt_d"),
        )
