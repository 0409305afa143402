"""Gaussian posterior q(x_{t-1} | x_t, x_0) and the noise-prediction (DDPM) update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from .models import EquivalenceReport
from .numerics import Rng, ShapeError, Tensor, as_tensor
from .schedule import DiffusionSchedule, Timestep, check_timestep, per_row

Scalar = Union[float, np.ndarray]

EQUIVALENCE_TOL = 1e-10
QUADRATURE_POINTS = 20_000
QUADRATURE_WIDTH = 10.0


@dataclass(frozen=True, eq=False)
class PosteriorParams:
    """mean = coef_x0 * x0 + coef_xt * xt, variance var. Per-row arrays when t is an array."""

    t: Timestep
    coef_x0: Scalar
    coef_xt: Scalar
    var: Scalar


def posterior_params(sched: DiffusionSchedule, t: Timestep) -> PosteriorParams:
    check_timestep(sched, t, low=1)
    t_arr = np.asarray(t)
    ab, ab_prev = sched.alpha_bar[t_arr], sched.alpha_bar[t_arr - 1]
    beta, alpha = sched.beta[t_arr], sched.alpha[t_arr]
    coef_x0 = np.where(t_arr == 1, 1.0, np.sqrt(ab_prev) * beta / (1.0 - ab))
    coef_xt = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    var = (1.0 - ab_prev) * beta / (1.0 - ab)
    if t_arr.ndim == 0:
        return PosteriorParams(t=int(t_arr), coef_x0=float(coef_x0), coef_xt=float(coef_xt), var=float(var))
    return PosteriorParams(t=t_arr, coef_x0=coef_x0, coef_xt=coef_xt, var=var)


def _column(values: Scalar, like: Tensor):
    if np.ndim(values) == 0:
        return float(values)
    return np.asarray(values, dtype=like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def posterior_mean(params: PosteriorParams, x0: Tensor, xt: Tensor) -> Tensor:
    x0, xt = as_tensor(x0), as_tensor(xt)
    if x0.shape != xt.shape:
        raise ShapeError("posterior_sample", x0.shape, xt.shape)
    return x0 * _column(params.coef_x0, x0) + xt * _column(params.coef_xt, xt)


def posterior_sample(
    params: PosteriorParams,
    x0: Tensor,
    xt: Tensor,
    rng: Rng,
    deterministic_last: bool = True,
) -> Tensor:
    """Reparametrized draw from the posterior; gradients flow into x0.

    Rows with zero variance (t = 1) return the mean exactly and, with
    ``deterministic_last``, consume no randomness.
    """
    mean = posterior_mean(params, x0, xt)
    var = np.asarray(params.var)
    if var.ndim == 0:
        if var == 0.0 and deterministic_last:
            return mean
        eps = rng.normal(mean.shape)
        return mean + Tensor(eps, dtype=mean.dtype) * float(np.sqrt(var))

    noisy = var > 0.0 if deterministic_last else np.ones(var.shape, dtype=bool)
    if not noisy.any():
        return mean
    eps = np.zeros(mean.shape, dtype=mean.dtype)
    eps[noisy] = rng.normal((int(noisy.sum()),) + mean.shape[1:])
    return mean + Tensor(eps, dtype=mean.dtype) * _column(np.sqrt(var), mean)


def x0_from_eps(sched: DiffusionSchedule, xt: Tensor, eps: Tensor, t: Timestep) -> Tensor:
    """Invert the forward marginal: (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)."""
    check_timestep(sched, t)
    xt, eps = as_tensor(xt), as_tensor(eps)
    if xt.shape != eps.shape:
        raise ShapeError("x0_from_eps", xt.shape, eps.shape)
    noise_std = per_row(np.sqrt(1.0 - sched.alpha_bar), t, like=xt)
    inv_signal = per_row(1.0 / np.sqrt(sched.alpha_bar), t, like=xt)
    return (xt - eps * noise_std) * inv_signal


def _ddpm_alpha_bar(sched: DiffusionSchedule) -> np.ndarray:
    # DDPM works from the betas alone: alpha_bar_t = prod_{s <= t} (1 - beta_s)
    return np.cumprod(1.0 - sched.beta)


def ddpm_sigma(sched: DiffusionSchedule, t: int) -> float:
    """sigma_t of the DDPM update with the posterior-variance choice (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) beta_t."""
    check_timestep(sched, t, low=1)
    alpha_bar = _ddpm_alpha_bar(sched)
    return float(np.sqrt((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * sched.beta[t]))


def ddpm_update(
    sched: DiffusionSchedule,
    xt: np.ndarray,
    eps: np.ndarray,
    t: int,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) + sigma_t z, with z = 0 at t = 1."""
    check_timestep(sched, t, low=1)
    alpha_bar = _ddpm_alpha_bar(sched)
    mean = (xt - sched.beta[t] / np.sqrt(1.0 - alpha_bar[t]) * eps) / np.sqrt(1.0 - sched.beta[t])
    if z is None or t == 1:
        return mean
    return mean + ddpm_sigma(sched, t) * z


def posterior_quadrature(
    sched: DiffusionSchedule,
    t: int,
    x0: float,
    xt: float,
    n: int = QUADRATURE_POINTS,
    width: float = QUADRATURE_WIDTH,
) -> Tuple[float, float]:
    """Mean and variance of q(x_t | x_{t-1}) q(x_{t-1} | x_0), normalized on a 1-D grid."""
    check_timestep(sched, t, low=1)
    if t == 1:
        return float(x0), 0.0
    prior_mean = np.sqrt(sched.alpha_bar[t - 1]) * x0
    prior_std = np.sqrt(1.0 - sched.alpha_bar[t - 1])
    lik_center = xt / np.sqrt(sched.alpha[t])
    lik_std = np.sqrt(sched.beta[t] / sched.alpha[t])
    lo = min(prior_mean - width * prior_std, lik_center - width * lik_std)
    hi = max(prior_mean + width * prior_std, lik_center + width * lik_std)
    grid = np.linspace(lo, hi, n)

    log_density = (norm.logpdf(grid, prior_mean, prior_std)
                   + norm.logpdf(xt, np.sqrt(sched.alpha[t]) * grid, np.sqrt(sched.beta[t])))
    density = np.exp(log_density - log_density.max())
    density /= trapezoid(density, grid)
    mean = trapezoid(grid * density, grid)
    var = trapezoid((grid - mean) ** 2 * density, grid)
    return float(mean), float(var)


def ddpm_equivalence_check(sched: DiffusionSchedule, trials: int = 1000, seed: int = 0,
                           tol: float = EQUIVALENCE_TOL) -> EquivalenceReport:
    """Compare the DDPM noise-prediction update with posterior sampling around a predicted x0."""
    rng = Rng(seed)
    steps = rng.integers(1, sched.T + 1, size=trials)
    max_mean_dev = max_sigma_dev = 0.0
    failing = None

    for t in steps:
        t = int(t)
        xt, eps = rng.normal(1), rng.normal(1)
        params = posterior_params(sched, t)
        x0_hat = x0_from_eps(sched, Tensor(xt), Tensor(eps), t).data
        via_posterior = params.coef_x0 * x0_hat + params.coef_xt * xt
        mean_dev = float(np.max(np.abs(ddpm_update(sched, xt, eps, t) - via_posterior)))
        sigma_dev = abs(ddpm_sigma(sched, t) - float(np.sqrt(params.var)))
        max_mean_dev = max(max_mean_dev, mean_dev)
        max_sigma_dev = max(max_sigma_dev, sigma_dev)
        if failing is None and max(mean_dev, sigma_dev) >= tol:
            failing = {"t": t, "xt": float(xt[0]), "eps": float(eps[0]),
                       "mean_deviation": mean_dev, "sigma_deviation": sigma_dev}

    # last denoising step: z is suppressed and the update is the posterior mean
    xt, eps, z = rng.normal(1), rng.normal(1), rng.normal(1)
    last = posterior_params(sched, 1)
    x0_hat = x0_from_eps(sched, Tensor(xt), Tensor(eps), 1).data
    last_dev = float(np.max(np.abs(ddpm_update(sched, xt, eps, 1, z=z) - (last.coef_x0 * x0_hat + last.coef_xt * xt))))
    last_dev = max(last_dev, abs(last.var))
    if failing is None and last_dev >= tol:
        failing = {"t": 1, "xt": float(xt[0]), "eps": float(eps[0]), "mean_deviation": last_dev}

    return EquivalenceReport(
        T=sched.T,
        trials=trials,
        max_mean_deviation=max_mean_dev,
        max_sigma_deviation=max_sigma_dev,
        last_step_deviation=last_dev,
        tolerance=tol,
        passed=failing is None,
        failing=failing,
    )
