"""Discrete variance-preserving schedule and forward diffusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import pandas as pd

from .numerics import Rng, Tensor, as_tensor

Timestep = Union[int, np.ndarray]

DEFAULT_BETA_MIN = 0.1
DEFAULT_BETA_MAX = 20.0
IDENTITY_TOL = 1e-12


class ScheduleError(ValueError):
    """Raised when schedule constants are invalid."""


class TimestepError(ValueError):
    """Raised when a timestep lies outside the schedule."""


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-step quantities indexed by t = 0..T; index 0 is clean data (beta 0, alpha_bar 1)."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def sigma2(self, t: Timestep) -> np.ndarray:
        return vp_variance(np.asarray(t) / self.T, self.beta_min, self.beta_max)


def vp_variance(tau, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX):
    """Continuous VP variance 1 - exp(-beta_min tau - 0.5 (beta_max - beta_min) tau^2)."""
    tau = np.asarray(tau, dtype=np.float64)
    return -np.expm1(-beta_min * tau - 0.5 * (beta_max - beta_min) * tau ** 2)


def build_schedule(
    T: int,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    """Discretize the VP variance function into T equidistant steps."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be an integer >= 1, got {T}.")
    if not 0 < beta_min <= beta_max:
        raise ScheduleError(f"Need 0 < beta_min <= beta_max, got beta_min={beta_min}, beta_max={beta_max}.")
    T = int(T)
    steps = np.arange(1, T + 1, dtype=np.float64)
    exponents = beta_min / T + 0.5 * (beta_max - beta_min) * (2 * steps - 1) / T ** 2

    beta = np.concatenate([[0.0], -np.expm1(-exponents)])
    alpha = np.concatenate([[1.0], np.exp(-exponents)])
    alpha_bar = np.concatenate([[1.0], np.exp(-np.cumsum(exponents))])

    if not (np.all((beta[1:] > 0) & (beta[1:] < 1)) and alpha_bar[-1] > 0):
        raise ScheduleError(
            f"beta_min={beta_min}, beta_max={beta_max} saturate a {T}-step schedule "
            f"(beta_t must lie in (0, 1) and alpha_bar_T > 0)."
        )
    if not (np.allclose(np.cumprod(alpha), alpha_bar, rtol=1e-12, atol=0.0)
            and np.max(np.abs((1.0 - alpha_bar) - vp_variance(np.arange(T + 1) / T, beta_min, beta_max))) < IDENTITY_TOL
            and np.all(np.diff(beta[1:]) >= 0) and np.all(np.diff(alpha_bar) < 0)):
        raise ScheduleError(f"Discretization of beta_min={beta_min}, beta_max={beta_max} into {T} steps is inconsistent.")

    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return DiffusionSchedule(T=T, beta_min=float(beta_min), beta_max=float(beta_max),
                             beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def check_timestep(sched: DiffusionSchedule, t: Timestep, low: int = 0) -> np.ndarray:
    arr = np.asarray(t)
    if arr.size and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < low or arr.max() > sched.T):
        raise TimestepError(f"Timestep {t} outside [{low}, {sched.T}].")
    return arr


def per_row(values: np.ndarray, t: Timestep, like: Tensor = None):
    """Gather schedule values at t: a float for scalar t, a (batch, 1) column otherwise."""
    arr = np.asarray(t)
    if arr.ndim == 0:
        return float(values[int(arr)])
    column = values[arr].reshape(-1, *([1] * (like.ndim - 1 if like is not None else 1)))
    if like is not None:
        column = column.astype(like.dtype, copy=False)
    return column


def marginal_params(sched: DiffusionSchedule, t: Timestep) -> Tuple:
    """(sqrt(alpha_bar_t), 1 - alpha_bar_t) of q(x_t | x_0); t = 0 gives (1, 0)."""
    check_timestep(sched, t)
    alpha_bar = sched.alpha_bar[np.asarray(t)]
    mean_coef, var = np.sqrt(alpha_bar), 1.0 - alpha_bar
    if np.ndim(t) == 0:
        return float(mean_coef), float(var)
    return mean_coef, var


def forward_sample(sched: DiffusionSchedule, x0: Tensor, t: Timestep, rng: Rng, return_noise: bool = False):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; differentiable in x0."""
    check_timestep(sched, t)
    x0 = as_tensor(x0)
    eps = Tensor(rng.normal(x0.shape), dtype=x0.dtype)
    mean_coef = per_row(np.sqrt(sched.alpha_bar), t, like=x0)
    std = per_row(np.sqrt(1.0 - sched.alpha_bar), t, like=x0)
    xt = x0 * mean_coef + eps * std
    return (xt, eps) if return_noise else xt


def stepwise_sample(sched: DiffusionSchedule, x_prev: Tensor, t: Timestep, rng: Rng) -> Tensor:
    """One forward step q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    check_timestep(sched, t, low=1)
    x_prev = as_tensor(x_prev)
    eps = Tensor(rng.normal(x_prev.shape), dtype=x_prev.dtype)
    return x_prev * per_row(np.sqrt(sched.alpha), t, like=x_prev) + eps * per_row(np.sqrt(sched.beta), t, like=x_prev)


def schedule_table(sched: DiffusionSchedule) -> pd.DataFrame:
    steps = np.arange(1, sched.T + 1)
    return pd.DataFrame({
        "t": steps,
        "beta": sched.beta[1:],
        "alpha_bar": sched.alpha_bar[1:],
        "sigma2": sched.sigma2(steps),
    })
