"""Typer CLI for ddgan."""
from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, List, Optional, TypeVar

import pandas as pd
import typer

from .checkpoint import CheckpointError
from .config import DEFAULT_CONFIG, ConfigError, configure_logging, resolve_output_dir
from .evaluation import ModeAssignmentError, RunResult, compare_runs, mode_report
from .ingest import ConfigFileError, UnsupportedFileError, build_train_config, load_config_values, load_samples
from .models import SampleRequest
from .nets import NetConfigError
from .numerics import GradError, Rng, ShapeError
from .oracle import MixtureError, QuadratureError, make_bimodal, make_dataset, oracle_sweep, small_step_sweep
from .posterior import ddpm_equivalence_check
from .presets import PRESETS, UnknownPresetError, ablate as run_ablation, get_preset, preset_config_text, unmet_expectations
from .sampling import SAMPLE_STREAM, SamplingError, conditional_fan, load_model, sample_run
from .schedule import ScheduleError, TimestepError, build_schedule, schedule_table
from .training import TrainingDivergedError, train as run_training
from .utils import save_csv, save_json

app = typer.Typer(help="Denoising diffusion GANs on toy data: schedules, oracles, training, sampling and evaluation.")

DOMAIN_ERRORS = (
    CheckpointError,
    ConfigError,
    ConfigFileError,
    GradError,
    MixtureError,
    ModeAssignmentError,
    NetConfigError,
    QuadratureError,
    SamplingError,
    ScheduleError,
    ShapeError,
    TimestepError,
    TrainingDivergedError,
    UnknownPresetError,
    UnsupportedFileError,
)

Item = TypeVar("Item")


@contextmanager
def _reported() -> Iterator[None]:
    try:
        yield
    except DOMAIN_ERRORS as exc:
        typer.secho(f"Error: {exc}", fg=typer.colors.RED, err=True)
        raise typer.Exit(code=1) from exc


def _split(text: Optional[str], cast: Callable[[str], Item]) -> Optional[List[Item]]:
    if not text:
        return None
    try:
        return [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise typer.BadParameter(f"cannot parse '{text}': {exc}") from exc


def _on_off(value: str) -> bool:
    if value.lower() not in ("on", "off"):
        raise ValueError("use on/off")
    return value.lower() == "on"


def _samples_frame(samples) -> pd.DataFrame:
    return pd.DataFrame(samples, columns=[f"dim{i}" for i in range(samples.shape[1])])


def _default_out(name: str) -> Path:
    return Path(DEFAULT_CONFIG.output_dir) / name


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, help="Logging level (default from DDGAN_LOG_LEVEL).")):
    configure_logging(log_level)


@app.command()
def schedule(
    T: int = typer.Option(4, "--T", help="Number of diffusion steps."),
    beta_min: float = typer.Option(0.1, help="beta_min of the continuous variance schedule."),
    beta_max: float = typer.Option(20.0, help="beta_max of the continuous variance schedule."),
    out: Optional[Path] = typer.Option(None, help="Also write the table to this CSV file."),
):
    """Print the discretized schedule (t, beta, alpha_bar, sigma2) as CSV."""
    with _reported():
        table = schedule_table(build_schedule(T, beta_min, beta_max))
    if out is not None:
        save_csv(table, out)
    typer.echo(table.to_csv(index=False), nl=False)


@app.command()
def oracle(
    out: Optional[Path] = typer.Option(None, help="Output directory (default: <DDGAN_OUTPUT_DIR>/oracle)."),
    T: int = typer.Option(6, "--T", help="Steps of the demo schedule."),
    t: int = typer.Option(4, "--t", help="Conditioning step."),
    x_t: float = typer.Option(0.0, "--x-t", help="Conditioning value."),
    gaps: str = typer.Option("1,2,3,4", help="Comma-separated step gaps."),
    separation: float = typer.Option(1.0, help="Distance of each mode from the origin."),
    std: float = typer.Option(0.1, help="Mode standard deviation."),
    small_step_tau: Optional[float] = typer.Option(0.25, help="Normalized time for the small-step sweep; empty to skip."),
):
    """Exact denoising posteriors of 1-D two-mode data: curves, KL to a Gaussian, mode counts."""
    out_dir = resolve_output_dir(out or _default_out("oracle"))
    with _reported():
        mix = make_bimodal(separation, std)
        curves, summary = oracle_sweep(mix, build_schedule(T), x_t, t, _split(gaps, int) or [1])
        save_csv(curves, out_dir / "curves.csv")
        save_csv(summary, out_dir / "summary.csv")
        if small_step_tau is not None:
            save_csv(small_step_sweep(mix, x_t, small_step_tau), out_dir / "small_step.csv")
    typer.echo(summary.to_string(index=False))
    typer.secho(f"Oracle artifacts written to {out_dir}", fg=typer.colors.GREEN)


@app.command()
def train(
    config: Optional[Path] = typer.Option(None, exists=True, readable=True, help="KEY=VALUE config file."),
    preset: Optional[str] = typer.Option(None, help="Start from a named preset (see `ddgan presets`)."),
    out: Optional[Path] = typer.Option(None, help="Run directory (default: <DDGAN_OUTPUT_DIR>/train)."),
    seed: Optional[int] = typer.Option(None, help="Override the config seed."),
    iterations: Optional[int] = typer.Option(None, help="Override the iteration count."),
    data: Optional[Path] = typer.Option(None, exists=True, readable=True, help="Train on a sample CSV instead of the configured mixture."),
):
    """Train a model; writes config echo, metrics CSV and checkpoints."""
    out_dir = resolve_output_dir(out or _default_out("train"))
    with _reported():
        values = dict(get_preset(preset).overrides) if preset else {}
        if config is not None:
            values.update(load_config_values(config))
        if "dtype" not in values:
            values["dtype"] = DEFAULT_CONFIG.ensure_dtype()
        values.update({k: v for k, v in {"seed": seed, "iterations": iterations}.items() if v is not None})
        cfg = build_train_config(values, source=str(config or preset or "flags"))
        source = load_samples(data) if data is not None else make_dataset(cfg.dataset, cfg.dataset_std)
        result = run_training(cfg, source, out_dir=out_dir, progress=DEFAULT_CONFIG.progress)
    last = result.metrics[-1]
    typer.secho(
        f"Trained {cfg.iterations} iterations (d_loss {last.d_loss:.4f}, g_loss {last.g_loss:.4f}); artifacts in {out_dir}",
        fg=typer.colors.GREEN,
    )


@app.command()
def sample(
    checkpoint: Path = typer.Option(..., help="Checkpoint .npz file."),
    n: int = typer.Option(1000, help="Number of samples."),
    seed: int = typer.Option(0, help="Sampling seed."),
    ema: bool = typer.Option(True, "--ema/--raw", help="Use EMA weights or the raw generator."),
    x_t: Optional[str] = typer.Option(None, "--x-t", help="Comma-separated conditioning point (with --t)."),
    t: Optional[int] = typer.Option(None, "--t", help="Conditioning step (with --x-t)."),
    out: Optional[Path] = typer.Option(None, help="Output directory (default: <DDGAN_OUTPUT_DIR>/sample)."),
):
    """Generate samples; writes samples.csv and summary.json."""
    out_dir = resolve_output_dir(out or _default_out("sample"))
    try:
        request = SampleRequest(checkpoint=checkpoint, n=n, use_ema=ema, seed=seed, x_t=_split(x_t, float), t=t)
    except ValueError as exc:
        raise typer.BadParameter(str(exc)) from exc
    with _reported():
        samples, summary = sample_run(request)
    save_csv(_samples_frame(samples), out_dir / "samples.csv")
    save_json(summary.model_dump(), out_dir / "summary.json")
    typer.secho(
        f"{n} samples, NFE {summary.nfe}, {summary.seconds_per_100:.4f}s per 100; written to {out_dir}",
        fg=typer.colors.GREEN,
    )


@app.command()
def fan(
    checkpoint: Path = typer.Option(..., help="Checkpoint .npz file."),
    x_t: str = typer.Option(..., "--x-t", help="Comma-separated conditioning point."),
    t: int = typer.Option(..., "--t", help="Conditioning step."),
    m: int = typer.Option(100, help="Number of latent draws."),
    seed: int = typer.Option(0, help="Sampling seed."),
    rollout: bool = typer.Option(False, "--rollout/--prediction", help="Full rollout from t, or the generator's x0 prediction."),
    ema: bool = typer.Option(True, "--ema/--raw", help="Use EMA weights or the raw generator."),
    out: Optional[Path] = typer.Option(None, help="Output directory (default: <DDGAN_OUTPUT_DIR>/fan)."),
):
    """Samples of x_0 given one fixed x_t, to inspect multimodality of the learned denoiser."""
    out_dir = resolve_output_dir(out or _default_out("fan"))
    with _reported():
        model = load_model(checkpoint, use_ema=ema)
        sched = build_schedule(model.config.T, model.config.beta_min, model.config.beta_max)
        samples = conditional_fan(model, sched, _split(x_t, float), t, m, Rng.derive(seed, SAMPLE_STREAM), rollout=rollout)
    save_csv(_samples_frame(samples), out_dir / "fan.csv")
    distinct = len({tuple(row) for row in samples.tolist()})
    typer.secho(f"{m} outputs ({distinct} distinct) written to {out_dir / 'fan.csv'}", fg=typer.colors.GREEN)


@app.command(name="eval")
def evaluate(
    samples: Path = typer.Option(..., exists=True, readable=True, help="Samples CSV (from `ddgan sample`)."),
    config: Optional[Path] = typer.Option(None, exists=True, readable=True, help="Config file naming the dataset."),
    preset: Optional[str] = typer.Option(None, help="Preset naming the dataset and the acceptance bar."),
    radius: float = typer.Option(3.0, help="Quality radius in mode standard deviations."),
    label: str = typer.Option("run", help="Row label in the comparison CSV."),
    out: Optional[Path] = typer.Option(None, help="Output directory (default: <DDGAN_OUTPUT_DIR>/eval)."),
):
    """Mode coverage report for samples of a mixture dataset."""
    out_dir = resolve_output_dir(out or _default_out("eval"))
    with _reported():
        chosen = get_preset(preset) if preset else None
        values = dict(chosen.overrides) if chosen else {}
        if config is not None:
            values.update(load_config_values(config))
        cfg = build_train_config(values, source=str(config or preset or "defaults"))
        mix = make_dataset(cfg.dataset, cfg.dataset_std)
        report = mode_report(load_samples(samples), mix, quality_radius_in_std=radius)
    save_json(report.model_dump(), out_dir / "mode_report.json")
    save_csv(compare_runs([RunResult(label=label, config=cfg, report=report)]), out_dir / "comparison.csv")
    typer.echo(
        f"modes {report.modes_covered}/{report.total_modes}, high quality {report.high_quality_fraction:.3f}, "
        f"mode KL {report.mode_kl:.4f}"
    )
    if chosen and chosen.expected:
        failures = unmet_expectations(report, chosen.expected)
        if failures:
            typer.secho("Below the preset bar: " + "; ".join(failures), fg=typer.colors.YELLOW)
        else:
            typer.secho(f"Meets the '{chosen.name}' bar.", fg=typer.colors.GREEN)


@app.command(name="equivalence-check")
def equivalence_check(
    T: int = typer.Option(4, "--T", help="Number of diffusion steps."),
    trials: int = typer.Option(1000, help="Random trials."),
    seed: int = typer.Option(0, help="Seed of the trials."),
    out: Optional[Path] = typer.Option(None, help="Write the report JSON into this directory."),
):
    """Check that the posterior update and the noise-prediction update agree."""
    with _reported():
        report = ddpm_equivalence_check(build_schedule(T), trials=trials, seed=seed)
    if out is not None:
        save_json(report.model_dump(), resolve_output_dir(out) / "equivalence.json")
    if not report.passed:
        typer.secho(f"Updates disagree: {report.failing}", fg=typer.colors.RED, err=True)
        raise typer.Exit(code=1)
    typer.secho(
        f"{trials} trials agree (max mean deviation {report.max_mean_deviation:.2e}, "
        f"max sigma deviation {report.max_sigma_deviation:.2e})",
        fg=typer.colors.GREEN,
    )


@app.command()
def ablate(
    preset: str = typer.Option("step-ablation", help="Preset holding the grid."),
    seeds: int = typer.Option(5, help="Seeds per cell."),
    out: Optional[Path] = typer.Option(None, help="Output directory (default: <DDGAN_OUTPUT_DIR>/ablate)."),
    jobs: int = typer.Option(1, help="Parallel worker processes."),
    T: Optional[str] = typer.Option(None, "--T", help="Comma-separated step counts to keep."),
    parametrization: Optional[str] = typer.Option(None, help="Comma-separated parametrizations to keep."),
    latent: Optional[str] = typer.Option(None, help="Comma-separated on/off."),
    iterations: Optional[int] = typer.Option(None, help="Override iterations of every cell."),
):
    """Train every requested grid cell for several seeds and tabulate median mode metrics."""
    out_dir = resolve_output_dir(out or _default_out("ablate"))
    with _reported():
        _, medians = run_ablation(
            get_preset(preset),
            seeds,
            out_dir,
            jobs=jobs,
            T=_split(T, int),
            parametrization=_split(parametrization, str),
            latent=_split(latent, _on_off),
            iterations=iterations,
        )
    typer.echo(medians.to_string(index=False))
    typer.secho(f"Comparison written to {out_dir / 'comparison.csv'}", fg=typer.colors.GREEN)


@app.command()
def presets(dump: Optional[str] = typer.Option(None, help="Print this preset as a config file.")):
    """List presets, or dump one as KEY=VALUE text."""
    if dump:
        with _reported():
            typer.echo(preset_config_text(get_preset(dump)), nl=False)
        return
    for item in PRESETS.values():
        grid = f" grid: {', '.join(item.grid)}" if item.grid else ""
        typer.echo(f"- {item.name}: {item.description}{grid}")


if __name__ == "__main__":
    app()
