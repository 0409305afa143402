import numpy as np
import pytest

from ddgan.models import TrainConfig
from ddgan.nets import (
    DiscriminatorNet,
    GeneratorNet,
    NetConfigError,
    build_networks,
    denoise_step,
    time_embed,
)
from ddgan.numerics import Rng, ShapeError, Tensor, backward, gradcheck
from ddgan.posterior import posterior_params
from ddgan.schedule import build_schedule

SMALL = dict(latent_dim=3, hidden_dim=8, hidden_layers=2, time_embed_dim=4, latent_embed_dim=4, mapping_layers=1)


def _randomize_output(net, rng):
    for name, p in net.named_parameters():
        if name.startswith("out."):
            p.data = rng.uniform(-0.5, 0.5, p.shape)


def test_time_embedding_pairs():
    emb = time_embed(np.array([0, 3]), 6)
    assert emb.shape == (2, 6)
    np.testing.assert_allclose(emb[0, 0::2], 0.0)
    np.testing.assert_allclose(emb[0, 1::2], 1.0)
    np.testing.assert_allclose(emb[1, 0] ** 2 + emb[1, 1] ** 2, 1.0)
    with pytest.raises(NetConfigError):
        time_embed(1, 5)


@pytest.mark.parametrize("conditioning", ["concat", "adanorm"])
@pytest.mark.parametrize("use_latent", [True, False])
def test_generator_shapes(conditioning, use_latent):
    G = GeneratorNet(2, Rng(0), conditioning=conditioning, use_latent=use_latent, norm_groups=4, **SMALL)
    z = Tensor(np.zeros((5, 3))) if use_latent else None
    out = G(Tensor(np.zeros((5, 2))), z, np.full(5, 2))
    assert out.shape == (5, 2)


def test_output_layer_starts_at_zero():
    G = GeneratorNet(2, Rng(0), **SMALL)
    out = G(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 3))), 1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_latent_misuse_is_rejected():
    with_latent = GeneratorNet(2, Rng(0), **SMALL)
    without = GeneratorNet(2, Rng(0), use_latent=False, **SMALL)
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(NetConfigError):
        with_latent(x, None, 1)
    with pytest.raises(NetConfigError):
        without(x, Tensor(np.zeros((2, 3))), 1)


def test_generator_depends_on_latent():
    rng = np.random.default_rng(0)
    G = GeneratorNet(2, Rng(1), **SMALL)
    _randomize_output(G, rng)
    x = Tensor(np.zeros((1, 2)))
    a = G(x, Tensor(rng.normal(size=(1, 3))), 2).data
    b = G(x, Tensor(rng.normal(size=(1, 3))), 2).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("conditioning", ["concat", "adanorm"])
def test_generator_gradients_match_finite_differences(conditioning):
    rng = np.random.default_rng(2)
    G = GeneratorNet(2, Rng(3), conditioning=conditioning, norm_groups=2, **SMALL)
    _randomize_output(G, rng)
    x, z = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 3)))
    weights = Tensor(rng.normal(size=(4, 2)))
    params = G.parameters()
    assert gradcheck(lambda *_: (G(x, z, np.array([1, 2, 3, 4])) * weights).sum(), params) < 1e-6


def test_discriminator_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    D = DiscriminatorNet(2, Rng(5), hidden_dim=8, hidden_layers=2, time_embed_dim=4, minibatch_std=True)
    _randomize_output(D, rng)
    x_prev = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    x_t = Tensor(rng.normal(size=(6, 2)))
    assert gradcheck(lambda xp: D(xp, x_t, 3).sum(), [x_prev]) < 1e-6


def test_discriminator_shapes():
    D = DiscriminatorNet(2, Rng(0), hidden_dim=8, hidden_layers=1, time_embed_dim=4)
    assert D(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), 1).shape == (3,)
    with pytest.raises(ShapeError):
        D(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))), 1)
    unconditional = DiscriminatorNet(2, Rng(0), hidden_dim=8, hidden_layers=1, conditional=False)
    assert unconditional(Tensor(np.zeros((3, 2)))).shape == (3,)


def test_state_dict_round_trip():
    G = GeneratorNet(2, Rng(0), **SMALL)
    other = GeneratorNet(2, Rng(1), **SMALL)
    other.load_state_dict(G.state_dict())
    for (name, a), (_, b) in zip(G.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    with pytest.raises(NetConfigError):
        other.load_state_dict({"out.weight": np.zeros((8, 2))})


def test_build_networks_follows_config():
    config = TrainConfig(latent_dim=3, hidden_dim=8, hidden_layers=2, time_embed_dim=4, mode="augmentation")
    G, D = build_networks(config, 2, Rng(0))
    assert not G.conditional and G.use_latent
    assert not D.conditional
    G, D = build_networks(config.model_copy(update={"mode": "ddgan"}), 2, Rng(0))
    assert G.conditional and D.conditional


def test_denoise_step_at_last_step_returns_prediction():
    rng = np.random.default_rng(6)
    sched = build_schedule(4)
    G = GeneratorNet(2, Rng(0), **SMALL)
    _randomize_output(G, rng)
    x_t, z = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 3)))
    draws = Rng(0)
    out = denoise_step(G, sched, x_t, 1, draws, z=z)
    np.testing.assert_array_equal(out.data, G(x_t, z, 1).data)
    assert draws.draws == 0


@pytest.mark.parametrize("parametrization", ["x0", "noise", "direct"])
def test_denoise_step_draw_accounting(parametrization):
    sched = build_schedule(4)
    G = GeneratorNet(2, Rng(0), parametrization=parametrization, **SMALL)
    rng = Rng(1)
    denoise_step(G, sched, Tensor(np.zeros((5, 2))), 3, rng)
    noise = 0 if parametrization == "direct" else 5 * 2
    assert rng.draws == 5 * 3 + noise


def test_generator_receives_gradient_through_posterior_sample():
    rng = np.random.default_rng(7)
    sched = build_schedule(4)
    G = GeneratorNet(2, Rng(0), **SMALL)
    _randomize_output(G, rng)
    out = denoise_step(G, sched, Tensor(rng.normal(size=(4, 2))), 3, Rng(2))
    backward(out.sum())
    np.testing.assert_allclose(G._params["out.bias"].grad, 4 * posterior_params(sched, 3).coef_x0)
