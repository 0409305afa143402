import math

import numpy as np
import pytest

from ddgan.evaluation import mode_report
from ddgan.ingest import load_train_config
from ddgan.models import MetricsRecord, TrainConfig
from ddgan.numerics import Rng, Tensor, backward, default_dtype, sigmoid
from ddgan.oracle import make_25gaussians
from ddgan.presets import TOY25_ITERATIONS, ablate, get_preset
from ddgan.sampling import SAMPLE_STREAM, generate, load_model
from ddgan.training import (
    TRAIN_STREAM,
    Trainer,
    TrainingDivergedError,
    Triple,
    d_loss_terms,
    discriminator_loss,
    generator_loss,
    late_step_losses,
    r1_penalty,
    train,
)


def _const_d(value):
    return lambda x_prev, x_t=None, t=0: Tensor(np.full(x_prev.shape[0], value))


def _triple(rng, n=8, dim=2):
    return Triple(Tensor(rng.normal(size=(n, dim))), Tensor(rng.normal(size=(n, dim))), np.ones(n, dtype=int))


def _randomize_output(net, rng):
    for name, p in net.named_parameters():
        if name.startswith("out."):
            p.data = rng.uniform(-0.5, 0.5, p.shape)


def test_losses_at_zero_logits():
    rng = np.random.default_rng(0)
    real, fake = _triple(rng), _triple(rng)
    assert discriminator_loss(_const_d(0.0), real, fake).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    assert generator_loss(_const_d(0.0), fake).item() == pytest.approx(math.log(2), abs=1e-15)


def test_perfect_discriminator_has_vanishing_loss():
    real = Tensor(np.full(4, 60.0))
    fake = Tensor(np.full(4, -60.0))
    assert d_loss_terms(real, fake).mean().item() < 1e-20


def test_softplus_form_matches_direct_formula():
    rng = np.random.default_rng(1)
    real, fake = rng.uniform(-5, 5, 100), rng.uniform(-5, 5, 100)
    direct = -np.log(1 / (1 + np.exp(-real))) - np.log(1 - 1 / (1 + np.exp(-fake)))
    np.testing.assert_allclose(d_loss_terms(Tensor(real), Tensor(fake)).data, direct, atol=1e-12)


def test_r1_of_constant_discriminator_is_zero():
    real = _triple(np.random.default_rng(2))
    assert r1_penalty(_const_d(1.3), real, 0.5).item() == 0.0


def test_r1_of_linear_discriminator_matches_closed_form():
    rng = np.random.default_rng(3)
    real = _triple(rng, n=16)
    w = rng.normal(size=(2, 1))
    linear = lambda x_prev, x_t, t: (x_prev @ Tensor(w)).reshape(-1)  # noqa: E731
    gamma = 0.7
    s = 1 / (1 + np.exp(-(real.x_prev.data @ w)[:, 0]))
    expected = gamma / 2 * np.mean((s * (1 - s)) ** 2) * np.sum(w ** 2)
    assert r1_penalty(linear, real, gamma).item() == pytest.approx(expected, rel=1e-12)


def test_zero_gamma_leaves_discriminator_gradients_unchanged():
    rng = np.random.default_rng(4)
    real, fake = _triple(rng), _triple(rng)
    w = Tensor(rng.normal(size=(2, 1)), requires_grad=True)
    D = lambda x_prev, x_t, t: sigmoid(x_prev @ w).reshape(-1)  # noqa: E731
    backward(discriminator_loss(D, real, fake))
    plain = w.grad.copy()
    w.grad = None
    backward(discriminator_loss(D, real, fake) + r1_penalty(D, real, 0.0))
    np.testing.assert_array_equal(w.grad, plain)


def test_generator_gradient_is_nonzero(tiny_config):
    rng = np.random.default_rng(5)
    trainer = Trainer(tiny_config, make_25gaussians())
    _randomize_output(trainer.discriminator, rng)
    draws = Rng.derive(0, TRAIN_STREAM, 0)
    real = trainer.real_batch(draws)
    assert np.any(real.t > 1)
    backward(generator_loss(trainer.discriminator, trainer.fake_batch(real, draws)))
    grad_norm = sum(float(np.sum(p.grad ** 2)) for p in trainer.generator.parameters() if p.grad is not None)
    assert grad_norm > 0


def test_latent_free_gradients_are_reproducible(tiny_config):
    config = tiny_config.model_copy(update={"use_latent": False})
    rng = np.random.default_rng(6)
    trainer = Trainer(config, make_25gaussians())
    _randomize_output(trainer.discriminator, rng)
    grads = []
    for _ in range(2):
        trainer.opt_g.zero_grad()
        draws = Rng.derive(0, TRAIN_STREAM, 3)
        real = trainer.real_batch(draws)
        backward(generator_loss(trainer.discriminator, trainer.fake_batch(real, draws)))
        grads.append([p.grad.copy() for p in trainer.generator.parameters() if p.grad is not None])
    for a, b in zip(*grads):
        np.testing.assert_array_equal(a, b)


def test_real_batch_follows_forward_chain(tiny_config):
    trainer = Trainer(tiny_config.model_copy(update={"batch_size": 4000}), make_25gaussians())
    real = trainer.real_batch(Rng(0))
    assert set(np.unique(real.t)) == {1, 2}
    assert real.x_prev.shape == real.x_t.shape == (4000, 2)


def test_training_run_writes_artifacts(tmp_path, tiny_config):
    config = tiny_config.model_copy(update={"checkpoint_every": 3})
    result = train(config, make_25gaussians(), out_dir=tmp_path)
    assert [m.iteration for m in result.metrics] == [2, 4, 6]
    for record in result.metrics:
        assert all(math.isfinite(v) for v in (record.d_loss, record.g_loss, record.r1))
        assert set(record.d_loss_per_t) <= {1, 2}
    for name in ("config.cfg", "metrics.csv", "timing.csv", "checkpoint_3.npz", "checkpoint_6.npz", "checkpoint_final.npz"):
        assert (tmp_path / name).is_file(), name
    assert load_train_config(tmp_path / "config.cfg") == config
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "iteration,d_loss,g_loss,r1,lr,d_loss_t1,d_loss_t2"


def test_cosine_schedule_ends_at_zero(tiny_config):
    result = train(tiny_config, make_25gaussians())
    assert result.metrics[-1].lr == pytest.approx(0.0, abs=1e-20)
    assert 0.0 < result.metrics[0].lr < tiny_config.lr_g
    flat = train(tiny_config.model_copy(update={"cosine_decay": False}), make_25gaussians())
    assert {record.lr for record in flat.metrics} == {tiny_config.lr_g}


def test_late_step_losses_average_the_tail():
    records = [
        MetricsRecord(iteration=i, d_loss=1.0, g_loss=1.0, r1=0.0, d_loss_per_t={1: float(i), 2: 10.0 + i})
        for i in range(1, 21)
    ]
    assert late_step_losses(records) == {1: 19.5, 2: 29.5}
    assert late_step_losses(records[:3]) == {1: 3.0, 2: 13.0}
    assert late_step_losses([]) == {}


def test_training_is_deterministic(tmp_path, tiny_config):
    train(tiny_config, make_25gaussians(), out_dir=tmp_path / "a")
    train(tiny_config, make_25gaussians(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_ema_with_zero_decay_equals_generator(tiny_config):
    result = train(tiny_config.model_copy(update={"ema_decay": 0.0}), make_25gaussians())
    for name, p in result.generator.named_parameters():
        np.testing.assert_array_equal(result.ema.shadow[name], p.data)


def test_training_without_ema_stores_none(tiny_config):
    result = train(tiny_config.model_copy(update={"use_ema": False}), make_25gaussians())
    assert result.checkpoint.ema is None


def test_augmentation_mode_runs(tiny_config):
    result = train(tiny_config.model_copy(update={"mode": "augmentation"}), make_25gaussians())
    assert len(result.metrics) == 3
    assert all(record.d_loss_per_t == {} for record in result.metrics)
    assert not result.generator.conditional


def test_training_on_a_point_set(tiny_config):
    points = make_25gaussians().sample(Rng(0), 200)[0]
    result = train(tiny_config, points)
    assert result.checkpoint.data_dim == 2


def test_float32_training(tiny_config):
    result = train(tiny_config.model_copy(update={"dtype": "float32"}), make_25gaussians())
    assert all(p.dtype == np.float32 for p in result.generator.parameters())


def test_nan_loss_aborts_with_diagnostics(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setattr(Trainer, "generator_step", lambda self, real, rng: float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config, make_25gaussians(), out_dir=tmp_path)
    assert info.value.diagnostics["iteration"] == 0
    assert set(info.value.diagnostics) >= {"d_loss", "g_loss", "r1", "grad_norm_g", "grad_norm_d"}
    assert (tmp_path / "divergence.json").is_file()


def _train_and_score(config):
    mix = make_25gaussians(config.dataset_std)
    result = train(config, mix)
    model = load_model(result.checkpoint, use_ema=True)
    with default_dtype(config.dtype):
        samples = generate(model, result.schedule, 10_000, Rng.derive(config.seed, SAMPLE_STREAM))
    return result, mode_report(samples, mix)


@pytest.mark.slow
def test_toy_run_covers_every_mode():
    config = get_preset("toy25").train_config()
    assert config.iterations == TOY25_ITERATIONS
    result, report = _train_and_score(config)
    assert report.modes_covered == 25
    assert report.high_quality_fraction >= 0.8
    assert report.mode_kl <= 0.2
    late = late_step_losses(result.metrics)
    assert all(late[t] >= late[1] for t in range(2, config.T + 1))


@pytest.mark.slow
def test_single_step_covers_fewer_modes(tmp_path):
    _, medians = ablate(get_preset("step-ablation"), 5, tmp_path, jobs=4, T=[1, 4], parametrization=["x0"], latent=[True])
    one, four = medians.iloc[0], medians.iloc[1]
    assert (one["T"], four["T"]) == (1, 4)
    assert one["modes_covered"] < four["modes_covered"]
    assert one["mode_kl"] > four["mode_kl"]
