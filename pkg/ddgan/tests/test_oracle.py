import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from ddgan.numerics import Rng
from ddgan.oracle import (
    GaussianMixture,
    MixtureError,
    bayes_posterior_density,
    count_local_maxima,
    default_demo,
    diffused_marginal,
    gaussian_fit_kl,
    make_25gaussians,
    make_bimodal,
    make_dataset,
    oracle_sweep,
    posterior_grid,
    small_step_sweep,
    total_variation,
    true_denoising_posterior,
)
from ddgan.schedule import build_schedule


@pytest.fixture
def demo():
    return default_demo()


def test_25gaussians_layout():
    mix = make_25gaussians()
    assert mix.n_components == 25
    assert mix.dim == 2
    np.testing.assert_allclose(mix.weights.sum(), 1.0)
    assert sorted(set(mix.means[:, 0])) == [-4.0, -2.0, 0.0, 2.0, 4.0]
    np.testing.assert_allclose(mix.variances, 0.05 ** 2)


def test_invalid_mixtures():
    with pytest.raises(MixtureError):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(MixtureError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 1)), np.array([0.0]))
    with pytest.raises(MixtureError):
        make_dataset("spiral", 0.1)


def test_sample_uses_component_labels():
    mix = make_25gaussians(std=0.01)
    points, labels = mix.sample(Rng(0), 500)
    assert points.shape == (500, 2)
    assert np.all(np.linalg.norm(points - mix.means[labels], axis=1) < 0.1)


def test_25gaussians_sample_frequencies_are_uniform():
    mix = make_25gaussians()
    _, labels = mix.sample(Rng(3), 25_000)
    counts = np.bincount(labels, minlength=25)
    assert stats.chisquare(counts).pvalue > 1e-3
    fractions = counts / counts.sum()
    assert np.all((fractions >= 0.03) & (fractions <= 0.05))


def test_diffused_marginal_moments():
    mix, sched, _, _ = default_demo()
    marginal = diffused_marginal(mix, sched, 3)
    ab = sched.alpha_bar[3]
    np.testing.assert_allclose(marginal.means, np.sqrt(ab) * mix.means)
    np.testing.assert_allclose(marginal.variances, ab * mix.variances + 1 - ab)
    assert diffused_marginal(mix, sched, 0) is mix


def test_posterior_of_a_single_gaussian_is_gaussian():
    mix = GaussianMixture(np.array([1.0]), np.array([[0.3]]), np.array([0.2]))
    post = true_denoising_posterior(mix, build_schedule(6), [0.1], 4, 2)
    assert post.mixture.n_components == 1
    assert abs(gaussian_fit_kl(post)) < 1e-8


def test_posterior_requires_earlier_step(demo):
    mix, sched, x_t, t = demo
    with pytest.raises(MixtureError):
        true_denoising_posterior(mix, sched, [x_t], t, t)


def test_symmetric_demo_posterior_weights_are_even(demo):
    mix, sched, x_t, t = demo
    for s in range(t):
        post = true_denoising_posterior(mix, sched, [x_t], t, s)
        np.testing.assert_allclose(post.mixture.weights, [0.5, 0.5], atol=1e-12)


def test_closed_form_matches_brute_force_bayes(demo):
    mix, sched, _, t = demo
    for x_t in (-0.8, 0.0, 0.35):
        for s in range(t):
            post = true_denoising_posterior(mix, sched, [x_t], t, s)
            grid = posterior_grid(post)
            exact = post.pdf(grid)
            assert trapezoid(exact, grid) == pytest.approx(1.0, abs=1e-6)
            assert total_variation(exact, bayes_posterior_density(mix, sched, x_t, t, s, grid), grid) < 1e-6


def test_multimodality_grows_with_step_gap(demo):
    mix, sched, x_t, t = demo
    _, summary = oracle_sweep(mix, sched, x_t, t, [1, 2, 3, 4])
    maxima = dict(zip(summary["gap"], summary["local_maxima"]))
    kl = dict(zip(summary["gap"], summary["kl_to_gaussian"]))
    assert maxima[1] == 1
    assert maxima[3] >= 2 and maxima[4] >= 2
    assert kl[1] < kl[2] < kl[4]
    assert (summary["tv_to_bayes"] < 1e-6).all()


def test_sweep_curves_cover_every_gap(demo):
    mix, sched, x_t, t = demo
    curves, summary = oracle_sweep(mix, sched, x_t, t, [1, 4], curve_points=50)
    assert len(curves) == 100
    assert set(curves["gap"]) == {1, 4}
    assert list(summary.columns) == ["gap", "s", "kl_to_gaussian", "local_maxima", "tv_to_bayes", "mass"]


def test_small_steps_approach_a_gaussian():
    table = small_step_sweep(make_bimodal(), 0.0, 0.25)
    assert list(table["T"]) == [8, 16, 32, 64, 128]
    assert np.all(np.diff(table["kl_to_gaussian"]) <= 0)
    assert table["kl_to_gaussian"].iloc[-1] < 1e-3


def test_count_local_maxima():
    x = np.linspace(-3, 3, 601)
    assert count_local_maxima(np.exp(-x ** 2)) == 1
    assert count_local_maxima(np.exp(-(x - 1.5) ** 2 / 0.1) + np.exp(-(x + 1.5) ** 2 / 0.1)) == 2
    assert count_local_maxima(np.ones(2)) == 0


def test_grid_quadrature_is_one_dimensional():
    with pytest.raises(MixtureError):
        posterior_grid(make_25gaussians())
