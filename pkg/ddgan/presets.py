"""Named experiments and the ablation harness."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .evaluation import RunResult, compare_runs, mode_report
from .models import ExperimentPreset, ModeReport, TrainConfig
from .numerics import Rng
from .oracle import make_dataset
from .sampling import SAMPLE_STREAM, generate, load_model
from .training import train
from .utils import render_config, save_csv, save_json

logger = logging.getLogger(__name__)

MEDIAN_COLUMNS = ("modes_covered", "high_quality_fraction", "mode_kl")


class UnknownPresetError(KeyError):
    """Raised for a preset name that is not registered."""

    def __str__(self) -> str:
        return str(self.args[0])


TOY25_BAR = {"modes_covered_min": 25, "high_quality_fraction_min": 0.8, "mode_kl_max": 0.2}
# 50k default iterations cut so one 25-Gaussians run finishes within 20 CPU minutes
TOY25_ITERATIONS = 3000

PRESETS: Dict[str, ExperimentPreset] = {
    preset.name: preset
    for preset in (
        ExperimentPreset(
            name="toy25",
            description="25-Gaussians mode coverage with four denoising steps.",
            overrides={"dataset": "25gaussians", "T": 4, "seed": 7, "iterations": TOY25_ITERATIONS},
            expected=TOY25_BAR,
        ),
        ExperimentPreset(
            name="toy25-t1",
            description="Same protocol with a single step, i.e. an unconditional GAN.",
            overrides={"dataset": "25gaussians", "T": 1, "seed": 7, "iterations": TOY25_ITERATIONS},
        ),
        ExperimentPreset(
            name="bimodal-1d",
            description="1-D two-mode data for conditional multimodality at the symmetry point.",
            overrides={
                "dataset": "bimodal",
                "dataset_std": 0.1,
                "T": 4,
                "iterations": 5000,
                "batch_size": 256,
                "hidden_dim": 128,
            },
        ),
        ExperimentPreset(
            name="augmentation",
            description="One-shot GAN trained on diffusion-perturbed reals and fakes.",
            overrides={"dataset": "25gaussians", "T": 4, "mode": "augmentation", "seed": 7, "iterations": TOY25_ITERATIONS},
        ),
        ExperimentPreset(
            name="step-ablation",
            description="Steps, parametrization and latent ablation on 25-Gaussians.",
            overrides={"dataset": "25gaussians", "iterations": TOY25_ITERATIONS},
            grid={"T": [1, 2, 4, 8], "parametrization": ["x0", "direct", "noise"], "use_latent": [True, False]},
        ),
    )
}

# earlier name of the grid preset, still accepted by `ablate --preset`
PRESET_ALIASES = {"table3-toy": "step-ablation"}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[PRESET_ALIASES.get(name, name)]
    except KeyError:
        raise UnknownPresetError(f"Unknown preset '{name}'. Available: {', '.join([*PRESETS, *PRESET_ALIASES])}") from None


def preset_config_text(preset: ExperimentPreset) -> str:
    return render_config(preset.train_config())


def unmet_expectations(report: ModeReport, expected: Dict[str, float]) -> List[str]:
    """Human-readable list of acceptance bars the report misses (``<metric>_min`` / ``<metric>_max`` keys)."""
    values = report.model_dump()
    failures = []
    for key, bar in expected.items():
        metric, _, bound = key.rpartition("_")
        if bound == "min" and values[metric] < bar:
            failures.append(f"{metric}={values[metric]:.4g} below {bar}")
        elif bound == "max" and values[metric] > bar:
            failures.append(f"{metric}={values[metric]:.4g} above {bar}")
    return failures


# ----------------------------
# Ablation grid
# ----------------------------

def _label_value(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def cell_label(overrides: Dict[str, Any]) -> str:
    return "_".join(f"{key}-{_label_value(value)}" for key, value in overrides.items())


def grid_cells(
    preset: ExperimentPreset,
    T: Optional[Sequence[int]] = None,
    parametrization: Optional[Sequence[str]] = None,
    latent: Optional[Sequence[bool]] = None,
) -> List[Dict[str, Any]]:
    """Cross product of the preset grid; a filter replaces the values of its axis."""
    axes = dict(preset.grid)
    for key, chosen in (("T", T), ("parametrization", parametrization), ("use_latent", latent)):
        if chosen:
            axes[key] = list(chosen)
    if not axes:
        return [{}]
    keys = list(axes)
    return [dict(zip(keys, values)) for values in itertools.product(*(axes[k] for k in keys))]


@dataclass
class CellJob:
    label: str
    config: Dict[str, Any]
    out_dir: str
    eval_samples: int


def run_cell(job: CellJob) -> RunResult:
    """Train one (cell, seed), sample it and score mode coverage; module-level so it pickles."""
    config = TrainConfig(**job.config)
    mix = make_dataset(config.dataset, config.dataset_std)
    out_dir = Path(job.out_dir)
    result = train(config, mix, out_dir=out_dir)
    model = load_model(result.checkpoint, use_ema=config.use_ema)
    samples = generate(model, result.schedule, job.eval_samples, Rng.derive(config.seed, SAMPLE_STREAM))
    report = mode_report(samples, mix)
    save_json(report.model_dump(), out_dir / "mode_report.json")
    logger.info("%s seed %d: %d/%d modes, kl %.4f", job.label, config.seed,
                report.modes_covered, report.total_modes, report.mode_kl)
    return RunResult(label=job.label, config=config, report=report)


def ablation_jobs(
    preset: ExperimentPreset,
    seeds: int,
    out_dir: Path,
    cells: Sequence[Dict[str, Any]],
    iterations: Optional[int] = None,
) -> List[CellJob]:
    base_seed = preset.train_config().seed
    jobs = []
    for cell in cells:
        label = cell_label(cell) or preset.name
        for k in range(seeds):
            extra = {**cell, "seed": base_seed + k}
            if iterations is not None:
                extra["iterations"] = iterations
            config = preset.train_config(**extra)
            jobs.append(CellJob(
                label=label,
                config=config.model_dump(),
                out_dir=str(out_dir / label / f"seed_{base_seed + k}"),
                eval_samples=preset.eval_samples,
            ))
    return jobs


def median_table(runs: pd.DataFrame) -> pd.DataFrame:
    """Median mode metrics per cell, keeping the first-seen cell order."""
    grouped = runs.groupby("label", sort=False)
    table = grouped.agg(
        T=("T", "first"),
        parametrization=("parametrization", "first"),
        use_latent=("use_latent", "first"),
        seeds=("seed", "size"),
        **{column: (column, "median") for column in MEDIAN_COLUMNS},
    ).reset_index()
    return table.sort_values("T", kind="stable").reset_index(drop=True)


def ablate(
    preset: ExperimentPreset,
    seeds: int,
    out_dir: Path,
    jobs: int = 1,
    T: Optional[Sequence[int]] = None,
    parametrization: Optional[Sequence[str]] = None,
    latent: Optional[Sequence[bool]] = None,
    iterations: Optional[int] = None,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Run every requested cell for ``seeds`` seeds; writes runs.csv and comparison.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(preset, T=T, parametrization=parametrization, latent=latent)
    work = ablation_jobs(preset, seeds, out_dir, cells, iterations=iterations)
    logger.info("ablation '%s': %d cells x %d seeds on %d worker(s)", preset.name, len(cells), seeds, jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, work))
    else:
        results = [run_cell(job) for job in work]
    runs = compare_runs(results)
    medians = median_table(runs)
    save_csv(runs, out_dir / "runs.csv")
    save_csv(medians, out_dir / "comparison.csv")
    return runs, medians
