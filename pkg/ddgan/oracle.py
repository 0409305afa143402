"""Exact Gaussian-mixture marginals and true denoising posteriors.

With isotropic mixture data every diffused marginal is again a mixture, and the
true denoising distribution q(x_s | x_t) is a mixture whose component weights
depend on x_t. Everything here is closed form except the 1-D grid quadrature
used to measure how far a posterior is from its moment-matched Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .numerics import Rng
from .schedule import DiffusionSchedule, build_schedule, check_timestep

GRID_POINTS = 20_000
GRID_WIDTH = 10.0
WEIGHT_TOL = 1e-12
MASS_TOL = 1e-6


class MixtureError(ValueError):
    """Raised for malformed mixtures or invalid posterior requests."""


class QuadratureError(ValueError):
    """Raised when a density does not normalize on its quadrature grid."""


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted isotropic Gaussians: weights (K,), means (K, dim), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (len(weights) == len(means) == len(variances)) or len(weights) == 0:
            raise MixtureError("weights, means and variances must describe the same components")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise MixtureError(f"weights must be positive and sum to 1 (sum={weights.sum()!r})")
        if np.any(variances <= 0):
            raise MixtureError("component variances must be positive")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @classmethod
    def from_log_weights(cls, log_weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> "GaussianMixture":
        weights = np.exp(log_weights - logsumexp(log_weights))
        return cls(weights / weights.sum(), means, variances)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """(n, K) log densities of each component, without mixture weights."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=-1)
        return -0.5 * sq / self.variances - 0.5 * self.dim * np.log(2 * np.pi * self.variances)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(x) + np.log(self.weights), axis=1)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def sample(self, rng: Rng, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Draw n points; also returns the component index of each."""
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.normal((n, self.dim))
        return self.means[labels] + np.sqrt(self.variances[labels])[:, None] * noise, labels

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean and variance of the whole mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (self.variances[:, None] + self.means ** 2)
        return mean, second - mean ** 2


@dataclass(frozen=True, eq=False)
class DenoisingPosterior:
    """q(x_s | x_t) as a mixture over x_s."""

    mixture: GaussianMixture
    x_t: np.ndarray
    t: int
    s: int

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return self.mixture.pdf(x)


# ----------------------------
# Datasets
# ----------------------------

def make_25gaussians(std: float = 0.05) -> GaussianMixture:
    """25 equal-weight modes on the grid {-4, -2, 0, 2, 4}^2."""
    if std <= 0:
        raise MixtureError("std must be positive")
    axis = np.arange(-4.0, 5.0, 2.0)
    means = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    return GaussianMixture(np.full(25, 1 / 25), means, np.full(25, std ** 2))


def make_bimodal(separation: float = 1.0, std: float = 0.1) -> GaussianMixture:
    """0.5 N(-separation, std^2) + 0.5 N(+separation, std^2) in 1-D."""
    if std <= 0:
        raise MixtureError("std must be positive")
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[-separation], [separation]]), np.full(2, std ** 2))


def make_dataset(name: str, std: float) -> GaussianMixture:
    if name == "25gaussians":
        return make_25gaussians(std)
    if name == "bimodal":
        return make_bimodal(std=std)
    raise MixtureError(f"Unknown dataset '{name}'.")


# ----------------------------
# Exact marginals and posteriors
# ----------------------------

def diffused_marginal(mix: GaussianMixture, sched: DiffusionSchedule, t: int) -> GaussianMixture:
    check_timestep(sched, t)
    if t == 0:
        return mix
    ab = sched.alpha_bar[t]
    return GaussianMixture(mix.weights, np.sqrt(ab) * mix.means, ab * mix.variances + (1.0 - ab))


def _transition(sched: DiffusionSchedule, t: int, s: int) -> Tuple[float, float]:
    """q(x_t | x_s) = N(a x_s, c I)."""
    log_ratio = np.log(sched.alpha_bar[t]) - np.log(sched.alpha_bar[s])
    return float(np.exp(0.5 * log_ratio)), float(-np.expm1(log_ratio))


def true_denoising_posterior(
    mix: GaussianMixture,
    sched: DiffusionSchedule,
    x_t: Sequence[float],
    t: int,
    s: int,
) -> DenoisingPosterior:
    """Exact q(x_s | x_t) for 0 <= s < t <= T by per-component Gaussian products."""
    check_timestep(sched, t, low=1)
    check_timestep(sched, s)
    if not 0 <= s < t:
        raise MixtureError(f"Need 0 <= s < t, got s={s}, t={t}.")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(mix.dim)
    prior = diffused_marginal(mix, sched, s)
    a, c = _transition(sched, t, s)

    post_var = 1.0 / (1.0 / prior.variances + a * a / c)
    post_means = post_var[:, None] * (prior.means / prior.variances[:, None] + a * x_t / c)

    evidence_var = a * a * prior.variances + c
    sq = ((x_t[None, :] - a * prior.means) ** 2).sum(axis=1)
    log_evidence = -0.5 * sq / evidence_var - 0.5 * mix.dim * np.log(2 * np.pi * evidence_var)
    mixture = GaussianMixture.from_log_weights(np.log(prior.weights) + log_evidence, post_means, post_var)
    return DenoisingPosterior(mixture=mixture, x_t=x_t, t=t, s=s)


# ----------------------------
# Quadrature
# ----------------------------

def posterior_grid(post, n: int = GRID_POINTS, width: float = GRID_WIDTH) -> np.ndarray:
    """1-D grid spanning +-width standard deviations of the moment-matched Gaussian."""
    mixture = post.mixture if isinstance(post, DenoisingPosterior) else post
    if mixture.dim != 1:
        raise MixtureError("grid quadrature is only available in 1-D")
    mean, var = mixture.moments()
    std = float(np.sqrt(var[0]))
    return np.linspace(mean[0] - width * std, mean[0] + width * std, n)


def gaussian_fit_kl(post, n: int = GRID_POINTS, width: float = GRID_WIDTH) -> float:
    """KL(posterior || moment-matched Gaussian) by trapezoidal quadrature."""
    mixture = post.mixture if isinstance(post, DenoisingPosterior) else post
    grid = posterior_grid(mixture, n, width)
    log_p = mixture.logpdf(grid)
    p = np.exp(log_p)
    mass = trapezoid(p, grid)
    if abs(mass - 1.0) > MASS_TOL:
        raise QuadratureError(f"density integrates to {mass:.8f} on its grid")
    mean, var = mixture.moments()
    log_q = -0.5 * (grid - mean[0]) ** 2 / var[0] - 0.5 * np.log(2 * np.pi * var[0])
    return float(trapezoid(p * (log_p - log_q), grid))


def bayes_posterior_density(
    mix: GaussianMixture,
    sched: DiffusionSchedule,
    x_t: float,
    t: int,
    s: int,
    grid: np.ndarray,
) -> np.ndarray:
    """Brute-force Bayes: q(x_t | x_s) q(x_s) evaluated and normalized on a 1-D grid."""
    if mix.dim != 1:
        raise MixtureError("grid quadrature is only available in 1-D")
    a, c = _transition(sched, t, s)
    log_num = diffused_marginal(mix, sched, s).logpdf(grid) - 0.5 * (float(x_t) - a * grid) ** 2 / c
    density = np.exp(log_num - log_num.max())
    return density / trapezoid(density, grid)


def total_variation(p: np.ndarray, q: np.ndarray, grid: np.ndarray) -> float:
    return float(0.5 * trapezoid(np.abs(p - q), grid))


def count_local_maxima(density: np.ndarray, rel_floor: float = 1e-8) -> int:
    """Interior grid points higher than the left neighbour and not lower than the right one."""
    d = np.asarray(density)
    if d.size < 3:
        return 0
    mid = d[1:-1]
    peaks = (mid > d[:-2]) & (mid >= d[2:]) & (mid > rel_floor * d.max())
    return int(peaks.sum())


# ----------------------------
# Sweeps
# ----------------------------

def oracle_sweep(
    mix: GaussianMixture,
    sched: DiffusionSchedule,
    x_t: float,
    t: int,
    gaps: Iterable[int],
    curve_points: int = 400,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Density curves and a per-gap summary of q(x_{t-gap} | x_t) for 1-D data."""
    posteriors = [true_denoising_posterior(mix, sched, [x_t], t, t - gap) for gap in gaps]
    lo = min(posterior_grid(p)[0] for p in posteriors)
    hi = max(posterior_grid(p)[-1] for p in posteriors)
    display = np.linspace(lo, hi, curve_points)

    curves, summary = [], []
    for post in posteriors:
        gap = post.t - post.s
        grid = posterior_grid(post)
        exact = post.pdf(grid)
        brute = bayes_posterior_density(mix, sched, x_t, post.t, post.s, grid)
        summary.append({
            "gap": gap,
            "s": post.s,
            "kl_to_gaussian": gaussian_fit_kl(post),
            "local_maxima": count_local_maxima(exact),
            "tv_to_bayes": total_variation(exact, brute, grid),
            "mass": float(trapezoid(exact, grid)),
        })
        curves.append(pd.DataFrame({"gap": gap, "s": post.s, "x": display, "density": post.pdf(display)}))
    return pd.concat(curves, ignore_index=True), pd.DataFrame(summary)


def small_step_sweep(
    mix: GaussianMixture,
    x_t: float,
    tau: float,
    Ts: Sequence[int] = (8, 16, 32, 64, 128),
    beta_min: float = 0.1,
    beta_max: float = 20.0,
) -> pd.DataFrame:
    """Gap-1 KL-to-Gaussian at normalized time tau as the number of steps grows."""
    rows = []
    for T in Ts:
        sched = build_schedule(T, beta_min, beta_max)
        t = max(1, int(round(tau * T)))
        post = true_denoising_posterior(mix, sched, [x_t], t, t - 1)
        rows.append({"T": T, "t": t, "s": t - 1, "kl_to_gaussian": gaussian_fit_kl(post)})
    return pd.DataFrame(rows)


def default_demo(schedule: Optional[DiffusionSchedule] = None) -> Tuple[GaussianMixture, DiffusionSchedule, float, int]:
    """Bimodal 1-D data, a 6-step schedule, conditioning x_4 = 0 at the symmetry point."""
    return make_bimodal(), schedule or build_schedule(6), 0.0, 4
