import dataclasses

import numpy as np
import pytest
from scipy import stats

from ddgan.numerics import Rng, ShapeError, Tensor
from ddgan.posterior import (
    ddpm_equivalence_check,
    ddpm_sigma,
    ddpm_update,
    posterior_params,
    posterior_quadrature,
    posterior_sample,
    x0_from_eps,
)
from ddgan.schedule import TimestepError, build_schedule, forward_sample


def test_last_step_is_deterministic():
    params = posterior_params(build_schedule(4), 1)
    assert (params.coef_x0, params.coef_xt, params.var) == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("T", [2, 4, 8])
def test_closed_form_matches_quadrature(T):
    sched = build_schedule(T)
    rng = np.random.default_rng(T)
    for _ in range(20):
        t = int(rng.integers(2, T + 1))
        x0, xt = rng.normal(), rng.normal()
        params = posterior_params(sched, t)
        mean, var = posterior_quadrature(sched, t, x0, xt)
        assert params.coef_x0 * x0 + params.coef_xt * xt == pytest.approx(mean, abs=1e-6)
        assert params.var == pytest.approx(var, abs=1e-6)


def test_posterior_variance_below_forward_variance():
    sched = build_schedule(8)
    for t in range(2, 9):
        assert 0.0 < posterior_params(sched, t).var < sched.beta[t]


def test_zero_variance_rows_consume_no_randomness():
    sched = build_schedule(4)
    rng = Rng(0)
    x0, xt = Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 2)))
    out = posterior_sample(posterior_params(sched, 1), x0, xt, rng)
    np.testing.assert_array_equal(out.data, x0.data)
    assert rng.draws == 0


def test_mixed_rows_draw_only_for_noisy_steps():
    sched = build_schedule(4)
    rng = Rng(0)
    t = np.array([1, 3, 1, 2])
    out = posterior_sample(posterior_params(sched, t), Tensor(np.ones((4, 2))), Tensor(np.zeros((4, 2))), rng)
    assert rng.draws == 4
    np.testing.assert_array_equal(out.data[[0, 2]], 1.0)


def test_posterior_sample_distribution():
    sched = build_schedule(4)
    params = posterior_params(sched, 3)
    n = 20000
    out = posterior_sample(params, Tensor(np.full((n, 1), 0.5)), Tensor(np.full((n, 1), -0.2)), Rng(4))
    mean = params.coef_x0 * 0.5 + params.coef_xt * -0.2
    result = stats.kstest(out.data[:, 0], "norm", args=(mean, np.sqrt(params.var)))
    assert result.pvalue > 1e-3


def test_gradient_flows_into_x0():
    sched = build_schedule(4)
    params = posterior_params(sched, 2)
    x0 = Tensor(np.zeros((5, 1)), requires_grad=True)
    posterior_sample(params, x0, Tensor(np.ones((5, 1))), Rng(0)).sum().backward()
    np.testing.assert_allclose(x0.grad, params.coef_x0)


def test_shape_mismatch():
    sched = build_schedule(4)
    with pytest.raises(ShapeError) as info:
        posterior_sample(posterior_params(sched, 2), Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))), Rng(0))
    assert info.value.op == "posterior_sample"


def test_timestep_zero_has_no_posterior():
    with pytest.raises(TimestepError):
        posterior_params(build_schedule(4), 0)


def test_x0_from_eps_inverts_forward_sample():
    sched = build_schedule(4)
    x0 = Tensor(np.random.default_rng(1).normal(size=(10, 2)))
    xt, eps = forward_sample(sched, x0, 3, Rng(5), return_noise=True)
    np.testing.assert_allclose(x0_from_eps(sched, xt, eps, 3).data, x0.data, atol=1e-12)


def test_ddpm_sigma_is_posterior_std():
    sched = build_schedule(8)
    for t in range(1, 9):
        assert ddpm_sigma(sched, t) == pytest.approx(np.sqrt(posterior_params(sched, t).var), abs=1e-14)


def test_ddpm_update_ignores_noise_at_last_step():
    sched = build_schedule(4)
    xt, eps = np.array([0.4]), np.array([-1.0])
    np.testing.assert_array_equal(ddpm_update(sched, xt, eps, 1, z=np.array([3.0])), ddpm_update(sched, xt, eps, 1))


@pytest.mark.parametrize("T", [1, 2, 4, 8, 1000])
def test_noise_prediction_and_posterior_updates_agree(T):
    report = ddpm_equivalence_check(build_schedule(T), trials=1000, seed=T)
    assert report.passed, report.failing
    assert report.max_mean_deviation < 1e-10
    assert report.last_step_deviation < 1e-10


def test_ddpm_side_is_built_from_betas_alone():
    sched = build_schedule(8)
    drifted = dataclasses.replace(sched, alpha_bar=sched.alpha_bar * np.r_[1.0, np.full(8, 0.99)])
    assert ddpm_sigma(drifted, 5) == ddpm_sigma(sched, 5)
    report = ddpm_equivalence_check(drifted, trials=200, seed=0)
    assert not report.passed
    assert report.max_sigma_deviation > 1e-6
    assert ddpm_equivalence_check(sched, trials=200, seed=0).max_sigma_deviation < 1e-10
