"""Mode coverage, sample quality and run comparison for mixture data."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.spatial.distance import cdist, pdist
from scipy.special import rel_entr

from .models import ModeReport, TrainConfig
from .oracle import GaussianMixture

logger = logging.getLogger(__name__)

QUALITY_RADIUS_IN_STD = 3.0
MIN_SAMPLES_PER_MODE = 10
CONFIG_COLUMNS = ("T", "parametrization", "use_latent", "conditioning", "mode", "iterations", "seed")


class ModeAssignmentError(ValueError):
    """Raised on empty sample sets or mixtures whose quality balls overlap."""


@dataclass(frozen=True)
class ModeAssignments:
    nearest: np.ndarray
    distance: np.ndarray
    high_quality: np.ndarray
    total_modes: int


def assign_modes(
    samples: np.ndarray,
    mix: GaussianMixture,
    quality_radius_in_std: float = QUALITY_RADIUS_IN_STD,
) -> ModeAssignments:
    """Nearest-mode assignment; a sample is high quality within r * sigma of its mode."""
    points = np.asarray(samples, dtype=np.float64)
    if points.ndim == 1 and mix.dim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] == 0:
        raise ModeAssignmentError("no samples to assign")
    if points.shape[1] != mix.dim:
        raise ModeAssignmentError(f"samples have dimension {points.shape[1]}, mixture has {mix.dim}")
    radius = quality_radius_in_std * np.sqrt(mix.variances)
    if mix.n_components > 1:
        closest = float(pdist(mix.means).min())
        if closest <= 2.0 * float(radius.max()):
            raise ModeAssignmentError(
                f"modes overlap: closest means {closest:.4g} apart, quality radius {radius.max():.4g}"
            )
    distances = cdist(points, mix.means)
    nearest = np.argmin(distances, axis=1)
    distance = distances[np.arange(len(points)), nearest]
    return ModeAssignments(
        nearest=nearest,
        distance=distance,
        high_quality=distance <= radius[nearest],
        total_modes=mix.n_components,
    )


def mode_histogram(nearest: np.ndarray, total_modes: int) -> np.ndarray:
    return np.bincount(np.asarray(nearest, dtype=np.int64), minlength=total_modes)


def smoothed_mode_kl(counts: np.ndarray, weights: np.ndarray) -> float:
    """KL(generated || data) over modes, with add-one smoothing of the generated counts."""
    counts = np.asarray(counts, dtype=np.float64)
    p = (counts + 1.0) / (counts.sum() + counts.size)
    return float(np.sum(rel_entr(p, np.asarray(weights, dtype=np.float64))))


def mode_report(
    samples: np.ndarray,
    mix: GaussianMixture,
    quality_radius_in_std: float = QUALITY_RADIUS_IN_STD,
) -> ModeReport:
    assignments = assign_modes(samples, mix, quality_radius_in_std)
    n = len(assignments.nearest)
    if n < MIN_SAMPLES_PER_MODE * mix.n_components:
        logger.warning("only %d samples for %d modes; mode metrics will be noisy", n, mix.n_components)
    covered = np.unique(assignments.nearest[assignments.high_quality]).size
    counts = mode_histogram(assignments.nearest, mix.n_components)
    return ModeReport(
        modes_covered=int(covered),
        total_modes=mix.n_components,
        high_quality_fraction=float(assignments.high_quality.mean()),
        mode_kl=max(smoothed_mode_kl(counts, mix.weights), 0.0),
        n_samples=n,
    )


def _as_dict(value: Union[BaseModel, Mapping[str, Any], None]) -> Dict[str, Any]:
    if value is None:
        return {}
    if isinstance(value, BaseModel):
        return value.model_dump()
    return dict(value)


@dataclass
class RunResult:
    label: str
    config: Optional[Union[TrainConfig, Mapping[str, Any]]] = None
    report: Optional[Union[ModeReport, Mapping[str, Any]]] = None


def compare_runs(runs: Iterable[RunResult]) -> pd.DataFrame:
    """One row per run: label, the experiment knobs and the mode metrics.

    Missing values stay as NaN (empty cells in CSV); rows are ordered by T.
    """
    metric_columns = list(ModeReport.model_fields)
    rows: List[Dict[str, Any]] = []
    for run in runs:
        config, report = _as_dict(run.config), _as_dict(run.report)
        row: Dict[str, Any] = {"label": run.label}
        row.update({key: config.get(key) for key in CONFIG_COLUMNS})
        row.update({key: report.get(key) for key in metric_columns})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=["label", *CONFIG_COLUMNS, *metric_columns])
    if frame["T"].notna().any():
        frame = frame.sort_values("T", kind="stable", na_position="last").reset_index(drop=True)
    return frame
