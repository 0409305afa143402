"""Adversarial training of the denoising generator.

Each iteration draws one real batch, takes a discriminator step (loss plus R1)
and then a generator step against the updated discriminator on the same real
batch with fresh latents. Randomness for iteration ``i`` comes from
``Rng.derive(seed, TRAIN_STREAM, i)``, so runs are reproducible per iteration.
"""
from __future__ import annotations

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import Checkpoint, save_checkpoint
from .models import MetricsRecord, TrainConfig
from .nets import DiscriminatorNet, GeneratorNet, build_networks, denoise_step
from .numerics import (
    Rng,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad,
    no_grad,
    sample_normal,
    sigmoid,
    softplus,
)
from .optim import Adam, Ema, cosine_lr
from .oracle import GaussianMixture
from .schedule import DiffusionSchedule, build_schedule, forward_sample, stepwise_sample
from .utils import save_csv, save_json, write_config

logger = logging.getLogger(__name__)

INIT_STREAM = 0
TRAIN_STREAM = 1

DataSource = Union[GaussianMixture, np.ndarray]
Discriminator = Callable[..., Tensor]


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns NaN or infinite; carries the diagnostic dump."""

    def __init__(self, message: str, diagnostics: Dict[str, object]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Triple:
    """A discriminator input: x_{t-1}, its conditioning x_t (None when unconditional) and t per row."""

    x_prev: Tensor
    x_t: Optional[Tensor]
    t: np.ndarray


# ----------------------------
# Objectives
# ----------------------------

def d_loss_terms(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Per-row -log sigmoid(real) - log(1 - sigmoid(fake)) in softplus form."""
    return softplus(-real_logits) + softplus(fake_logits)


def discriminator_loss(D: Discriminator, real: Triple, fake: Triple) -> Tensor:
    return d_loss_terms(D(real.x_prev, real.x_t, real.t), D(fake.x_prev, fake.x_t, fake.t)).mean()


def generator_loss(D: Discriminator, fake: Triple) -> Tensor:
    """Non-saturating loss -log sigmoid(D(fake)); gradients flow back through fake.x_prev."""
    return softplus(-D(fake.x_prev, fake.x_t, fake.t)).mean()


def _r1_from_logits(real_logits: Tensor, x_prev: Tensor, gamma: float) -> Tensor:
    prob = sigmoid(real_logits)
    ones = Tensor(np.ones(prob.shape, dtype=prob.dtype))
    (g,) = grad(prob, [x_prev], grad_output=ones, create_graph=True)
    return (g * g).sum(axis=1).mean() * (gamma / 2.0)


def r1_penalty(D: Discriminator, real: Triple, gamma: float) -> Tensor:
    """(gamma / 2) * mean ||d sigmoid(D) / d x_{t-1}||^2 at real samples; differentiable in D."""
    if gamma == 0.0:
        return Tensor(0.0)
    x_prev = Tensor(real.x_prev.data, requires_grad=True)
    return _r1_from_logits(D(x_prev, real.x_t, real.t), x_prev, gamma)


# ----------------------------
# Helpers
# ----------------------------

def _data_sampler(data: DataSource) -> Tuple[Callable[[Rng, int], np.ndarray], int]:
    if isinstance(data, GaussianMixture):
        return (lambda rng, n: data.sample(rng, n)[0]), data.dim
    points = np.asarray(data, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or not len(points):
        raise ValueError(f"training data must be a non-empty (n, d) point set, got shape {points.shape}")
    return (lambda rng, n: points[rng.integers(0, len(points), n)]), points.shape[1]


def _grad_norm(params: Sequence[Tensor]) -> float:
    total = sum(float(np.sum(np.square(p.grad))) for p in params if p.grad is not None)
    return math.sqrt(total)


@contextmanager
def _frozen(params: Sequence[Tensor]) -> Iterator[None]:
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


@dataclass
class _Window:
    """Running sums between two metrics records."""

    T: int
    steps: int = 0
    d_loss: float = 0.0
    g_loss: float = 0.0
    r1: float = 0.0
    per_t_sum: np.ndarray = field(init=False)
    per_t_count: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_t_sum = np.zeros(self.T + 1)
        self.per_t_count = np.zeros(self.T + 1)

    def add(self, d_loss: float, g_loss: float, r1: float, rows: Optional[np.ndarray], t: Optional[np.ndarray]):
        self.steps += 1
        self.d_loss += d_loss
        self.g_loss += g_loss
        self.r1 += r1
        if rows is not None:
            self.per_t_sum += np.bincount(t, weights=rows, minlength=self.T + 1)
            self.per_t_count += np.bincount(t, minlength=self.T + 1)

    def record(self, iteration: int, lr: float, wall_clock: float) -> MetricsRecord:
        per_t = {
            t: float(self.per_t_sum[t] / self.per_t_count[t])
            for t in range(1, self.T + 1)
            if self.per_t_count[t]
        }
        return MetricsRecord(
            iteration=iteration,
            d_loss=self.d_loss / self.steps,
            g_loss=self.g_loss / self.steps,
            r1=self.r1 / self.steps,
            d_loss_per_t=per_t,
            lr=lr,
            wall_clock=wall_clock,
        )


# ----------------------------
# Trainer
# ----------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    schedule: DiffusionSchedule
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    ema: Optional[Ema]
    metrics: List[MetricsRecord]
    checkpoint: Checkpoint
    out_dir: Optional[Path] = None


class Trainer:
    """Holds networks, optimizers and the EMA for one run; ``run()`` trains to completion.

    Build it inside ``default_dtype(config.dtype)``; ``train()`` does that for you.
    """

    def __init__(self, config: TrainConfig, data: DataSource, out_dir: Optional[Path] = None, progress: bool = False):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.schedule = build_schedule(config.T, config.beta_min, config.beta_max)
        self._draw_data, self.data_dim = _data_sampler(data)
        self.generator, self.discriminator = build_networks(
            config, self.data_dim, Rng.derive(config.seed, INIT_STREAM)
        )
        betas = (config.beta1, config.beta2)
        self.opt_g = Adam(self.generator.parameters(), config.lr_g, betas)
        self.opt_d = Adam(self.discriminator.parameters(), config.lr_d, betas)
        self.ema = Ema(self.generator, config.ema_decay) if config.use_ema else None
        self.iteration = 0
        self.metrics: List[MetricsRecord] = []
        self._timings: List[Dict[str, float]] = []

    @property
    def one_shot(self) -> bool:
        return self.config.mode == "augmentation"

    def _lr(self, base: float) -> float:
        if not self.config.cosine_decay:
            return base
        # step i uses the rate after i + 1 steps; the last step runs at 0
        return cosine_lr(base, self.iteration + 1, self.config.iterations)

    # batches ---------------------------------------------------------------

    def real_batch(self, rng: Rng) -> Triple:
        cfg, sched = self.config, self.schedule
        x0 = Tensor(self._draw_data(rng, cfg.batch_size), dtype=get_default_dtype())
        if self.one_shot:
            levels = rng.integers(0, cfg.T, cfg.batch_size)
            return Triple(forward_sample(sched, x0, levels, rng), None, levels)
        t = rng.integers(1, cfg.T + 1, cfg.batch_size)
        x_prev = forward_sample(sched, x0, t - 1, rng)
        x_t = stepwise_sample(sched, x_prev, t, rng)
        return Triple(x_prev, x_t, t)

    def fake_batch(self, real: Triple, rng: Rng) -> Triple:
        """Generator samples paired with the real conditioning; differentiable unless under no_grad."""
        if self.one_shot:
            z = sample_normal(rng, (self.config.batch_size, self.generator.latent_dim))
            levels = rng.integers(0, self.config.T, self.config.batch_size)
            x0 = self.generator(None, z)
            return Triple(forward_sample(self.schedule, x0, levels, rng), None, levels)
        x_prev = denoise_step(self.generator, self.schedule, real.x_t, real.t, rng)
        return Triple(x_prev, real.x_t, real.t)

    # steps -----------------------------------------------------------------

    def discriminator_step(self, real: Triple, rng: Rng) -> Tuple[float, float, np.ndarray]:
        D, gamma = self.discriminator, self.config.r1_gamma
        with no_grad():
            fake = self.fake_batch(real, rng)
        x_prev = Tensor(real.x_prev.data, requires_grad=gamma > 0)
        real_logits = D(x_prev, real.x_t, real.t)
        rows = d_loss_terms(real_logits, D(fake.x_prev, fake.x_t, fake.t))
        d_loss = rows.mean()
        total, r1_value = d_loss, 0.0
        if gamma > 0:
            r1 = _r1_from_logits(real_logits, x_prev, gamma)
            total, r1_value = d_loss + r1, r1.item()
        self.opt_d.zero_grad()
        backward(total)
        self.opt_d.step(self._lr(self.config.lr_d))
        return d_loss.item(), r1_value, rows.data

    def generator_step(self, real: Triple, rng: Rng) -> float:
        self.opt_g.zero_grad()
        with _frozen(self.discriminator.parameters()):
            loss = generator_loss(self.discriminator, self.fake_batch(real, rng))
            backward(loss)
        self.opt_g.step(self._lr(self.config.lr_g))
        if self.ema is not None:
            self.ema.update(self.generator)
        return loss.item()

    # run -------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            data_dim=self.data_dim,
            iteration=self.iteration,
            generator=self.generator.state_dict(),
            discriminator=self.discriminator.state_dict(),
            ema=self.ema.state_dict() if self.ema is not None else None,
            rng_state={"seed": self.config.seed, "stream": TRAIN_STREAM, "next_iteration": self.iteration},
            optimizer_g=self.opt_g.state_dict(),
            optimizer_d=self.opt_d.state_dict(),
        )

    def _diverged(self, losses: Dict[str, float]) -> None:
        diagnostics = {
            "iteration": self.iteration,
            **losses,
            "grad_norm_g": _grad_norm(self.generator.parameters()),
            "grad_norm_d": _grad_norm(self.discriminator.parameters()),
        }
        message = f"non-finite loss at iteration {self.iteration}"
        if self.out_dir is not None:
            dump = self.out_dir / "divergence.json"
            save_json(diagnostics, dump)
            logger.error("%s; diagnostics written to %s", message, dump)
        else:
            logger.error("%s: %s", message, diagnostics)
        raise TrainingDivergedError(message, diagnostics)

    def run(self) -> TrainResult:
        cfg = self.config
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            write_config(cfg, self.out_dir / "config.cfg")
        logger.info("training %s model: T=%d, %d iterations, seed %d", cfg.mode, cfg.T, cfg.iterations, cfg.seed)

        start = time.perf_counter()
        window = _Window(cfg.T)
        for _ in tqdm(range(cfg.iterations), desc="train", disable=not self.progress):
            rng = Rng.derive(cfg.seed, TRAIN_STREAM, self.iteration)
            real = self.real_batch(rng)
            d_loss, r1, rows = self.discriminator_step(real, rng)
            g_loss = self.generator_step(real, rng)
            losses = {"d_loss": d_loss, "g_loss": g_loss, "r1": r1}
            if not all(math.isfinite(v) for v in losses.values()):
                self._diverged(losses)
            lr = self._lr(cfg.lr_g)
            self.iteration += 1
            window.add(d_loss, g_loss, r1, None if self.one_shot else rows, real.t)

            if self.iteration % cfg.log_every == 0 or self.iteration == cfg.iterations:
                record = window.record(self.iteration, lr, time.perf_counter() - start)
                self.metrics.append(record)
                self._timings.append({"iteration": record.iteration, "wall_clock": record.wall_clock})
                logger.info("iter %d: d_loss=%.4f g_loss=%.4f r1=%.4g",
                            record.iteration, record.d_loss, record.g_loss, record.r1)
                window = _Window(cfg.T)
            if self.out_dir is not None and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), self.out_dir / f"checkpoint_{self.iteration}.npz")

        late = late_step_losses(self.metrics)
        if 1 in late and any(loss < late[1] for t, loss in late.items() if t > 1):
            logger.warning("late discriminator loss at t>1 fell below the t=1 loss: %s", late)

        ckpt = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(ckpt, self.out_dir / "checkpoint_final.npz")
            save_csv([m.csv_row(cfg.T) for m in self.metrics], self.out_dir / "metrics.csv")
            save_csv(self._timings, self.out_dir / "timing.csv")
        return TrainResult(
            config=cfg,
            schedule=self.schedule,
            generator=self.generator,
            discriminator=self.discriminator,
            ema=self.ema,
            metrics=self.metrics,
            checkpoint=ckpt,
            out_dir=self.out_dir,
        )


def late_step_losses(metrics: Sequence[MetricsRecord], fraction: float = 0.1) -> Dict[int, float]:
    """Per-step discriminator loss averaged over the last ``fraction`` of the metrics records."""
    if not metrics:
        return {}
    tail = metrics[-max(1, math.ceil(len(metrics) * fraction)):]
    steps = sorted({t for record in tail for t in record.d_loss_per_t})
    return {
        t: float(np.mean([record.d_loss_per_t[t] for record in tail if t in record.d_loss_per_t]))
        for t in steps
    }


def train(
    config: TrainConfig,
    data: DataSource,
    out_dir: Optional[Path] = None,
    progress: bool = False,
) -> TrainResult:
    """Train a model on a mixture or a fixed point set; writes artifacts when ``out_dir`` is given."""
    with default_dtype(config.dtype):
        return Trainer(config, data, out_dir=out_dir, progress=progress).run()
