"""Few-step ancestral generation from trained generators."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .models import SampleRequest, SampleSummary, TrainConfig
from .nets import GeneratorNet, build_networks, denoise_step
from .numerics import Rng, Tensor, default_dtype, get_default_dtype, no_grad, sample_normal
from .posterior import x0_from_eps
from .schedule import DiffusionSchedule, TimestepError, build_schedule, check_timestep

logger = logging.getLogger(__name__)

SAMPLE_STREAM = 2


class SamplingError(ValueError):
    """Raised when a model cannot serve a sampling request."""


@dataclass
class Model:
    """A generator with the config it was trained under and which weights it carries."""

    generator: GeneratorNet
    config: TrainConfig
    uses_ema: bool = False

    @property
    def one_shot(self) -> bool:
        return self.config.mode == "augmentation"

    @property
    def nfe(self) -> int:
        return 1 if self.one_shot else self.config.T


def load_model(checkpoint: Union[Checkpoint, Path], use_ema: bool = True) -> Model:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if use_ema and ckpt.ema is None:
        raise CheckpointError("checkpoint holds no EMA weights; sample the raw generator explicitly")
    with default_dtype(ckpt.config.dtype):
        generator, _ = build_networks(ckpt.config, ckpt.data_dim, Rng(0))
        generator.load_state_dict(ckpt.ema if use_ema else ckpt.generator)
    logger.debug("loaded %s generator from iteration %d", "EMA" if use_ema else "raw", ckpt.iteration)
    return Model(generator=generator, config=ckpt.config, uses_ema=use_ema)


def _check_schedule(model: Model, sched: DiffusionSchedule) -> None:
    if sched.T != model.config.T:
        raise SamplingError(f"model was trained with T={model.config.T}, schedule has T={sched.T}")


def generate(model: Model, sched: DiffusionSchedule, n: int, rng: Rng) -> np.ndarray:
    """Draw n samples: x_T ~ N(0, I) then T denoising steps (one G call for a one-shot model)."""
    _check_schedule(model, sched)
    if n < 1:
        raise SamplingError("n must be >= 1")
    G = model.generator
    with default_dtype(model.config.dtype), no_grad():
        if model.one_shot:
            return G(None, sample_normal(rng, (n, G.latent_dim))).numpy().copy()
        x = sample_normal(rng, (n, G.data_dim))
        for t in range(sched.T, 0, -1):
            x = denoise_step(G, sched, x, t, rng)
    return x.numpy().copy()


def predict_x0(model: Model, sched: DiffusionSchedule, x_t: Tensor, t: int, rng: Rng) -> Tensor:
    """The generator's clean-data prediction at step t (one G call)."""
    G = model.generator
    if G.parametrization == "direct":
        raise SamplingError("a direct-denoising generator has no x0 prediction; use a full rollout")
    z = sample_normal(rng, (x_t.shape[0], G.latent_dim)) if G.use_latent else None
    out = G(x_t, z, t)
    return out if G.parametrization == "x0" else x0_from_eps(sched, x_t, out, t)


def conditional_fan(
    model: Model,
    sched: DiffusionSchedule,
    x_t: Sequence[float],
    t: int,
    m: int,
    rng: Rng,
    rollout: bool = False,
) -> np.ndarray:
    """m samples of p(x_0 | x_t) for one fixed x_t.

    By default each sample is the generator's x0 prediction under its own z, so
    its spread comes from the latent alone. With ``rollout`` the chain is run
    from t down to 0, which also adds posterior noise at every step above 1.
    """
    _check_schedule(model, sched)
    if model.one_shot:
        raise SamplingError("a one-shot model has no conditional denoiser")
    check_timestep(sched, t, low=1)
    G = model.generator
    point = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if point.size != G.data_dim:
        raise SamplingError(f"x_t has {point.size} coordinates, model expects {G.data_dim}")
    with default_dtype(model.config.dtype), no_grad():
        x = Tensor(np.tile(point, (m, 1)), dtype=get_default_dtype())
        if not rollout:
            return predict_x0(model, sched, x, t, rng).numpy().copy()
        for s in range(t, 0, -1):
            x = denoise_step(G, sched, x, s, rng)
    return x.numpy().copy()


def sample_run(request: SampleRequest) -> Tuple[np.ndarray, SampleSummary]:
    """Load, generate and time one request; timing is reported per batch of 100 samples."""
    model = load_model(request.checkpoint, use_ema=request.use_ema)
    cfg = model.config
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    rng = Rng.derive(request.seed, SAMPLE_STREAM)
    start = time.perf_counter()
    if request.x_t is not None:
        try:
            samples = conditional_fan(model, sched, request.x_t, request.t, request.n, rng)
        except TimestepError as exc:
            raise SamplingError(str(exc)) from exc
    else:
        samples = generate(model, sched, request.n, rng)
    elapsed = time.perf_counter() - start
    summary = SampleSummary(
        seed=request.seed,
        T=cfg.T,
        nfe=model.nfe,
        n=request.n,
        use_ema=request.use_ema,
        parametrization=cfg.parametrization,
        mode=cfg.mode,
        seconds_per_100=elapsed * 100.0 / request.n,
    )
    logger.info("generated %d samples with %d NFE in %.3fs", request.n, summary.nfe, elapsed)
    return samples, summary
