"""Time- and latent-conditioned generator and conditional discriminator."""
from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .models import TrainConfig
from .numerics import (
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    get_default_dtype,
    group_norm,
    leaky_relu,
    minibatch_stddev,
    sample_normal,
    slice_last,
)
from .posterior import posterior_params, posterior_sample, x0_from_eps
from .schedule import DiffusionSchedule, Timestep, check_timestep

logger = logging.getLogger(__name__)

EMBED_BASE = 10_000.0


class NetConfigError(ValueError):
    """Raised on inconsistent network configuration or misuse."""


def time_embed(t: Timestep, d: int) -> np.ndarray:
    """Sinusoidal embedding; entries come in (sin, cos) pairs per frequency."""
    if d % 2:
        raise NetConfigError(f"time embedding dimension must be even, got {d}")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = EMBED_BASE ** (-2.0 * np.arange(d // 2) / d)
    angles = t_arr[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _embed_batch(t: Timestep, d: int, batch: int, like: Tensor) -> Tensor:
    emb = time_embed(t, d)
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (batch, d))
    return Tensor(emb, dtype=like.dtype)


class Module:
    """Flat, ordered registry of named parameters."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def _add_linear(self, name: str, n_in: int, n_out: int, rng: Rng, zero: bool = False) -> None:
        if zero:
            dtype = get_default_dtype()
            weight, bias = np.zeros((n_in, n_out), dtype=dtype), np.zeros(n_out, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(n_in)
            weight, bias = rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out)
        self._params[f"{name}.weight"] = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self._params[f"{name}.bias"] = Tensor(bias, requires_grad=True, name=f"{name}.bias")

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self._params[name] = Tensor(value, requires_grad=True, name=name)

    def linear(self, name: str, x: Tensor) -> Tensor:
        return x @ self._params[f"{name}.weight"] + self._params[f"{name}.bias"]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise NetConfigError(f"state mismatch on parameters: {sorted(missing)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise NetConfigError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


class GeneratorNet(Module):
    """G(x_t, z, t) with concatenation or adaptive-normalization conditioning.

    The output is x0 (parametrization "x0"), x_{t-1} ("direct") or the forward
    noise ("noise"). With ``conditional=False`` the net is a one-shot G(z).
    """

    def __init__(
        self,
        data_dim: int,
        rng: Rng,
        latent_dim: int = 16,
        hidden_dim: int = 512,
        hidden_layers: int = 3,
        time_embed_dim: int = 32,
        conditioning: str = "concat",
        parametrization: str = "x0",
        use_latent: bool = True,
        latent_embed_dim: int = 128,
        mapping_layers: int = 3,
        norm_groups: int = 32,
        conditional: bool = True,
    ):
        super().__init__()
        if conditioning not in ("concat", "adanorm"):
            raise NetConfigError(f"unknown conditioning '{conditioning}'")
        if parametrization not in ("x0", "direct", "noise"):
            raise NetConfigError(f"unknown parametrization '{parametrization}'")
        if not conditional and not use_latent:
            raise NetConfigError("a one-shot generator needs a latent input")
        if conditioning == "adanorm" and hidden_dim % norm_groups:
            raise NetConfigError("hidden_dim must be divisible by norm_groups")
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.hidden_layers = hidden_layers
        self.time_embed_dim = time_embed_dim
        self.conditioning = conditioning
        self.parametrization = parametrization
        self.use_latent = use_latent
        self.mapping_layers = mapping_layers
        self.norm_groups = norm_groups
        self.conditional = conditional

        cond_dim = data_dim + time_embed_dim if conditional else 0
        adaptive = conditioning == "adanorm" and use_latent
        if conditioning == "concat":
            n_in = cond_dim + (latent_dim if use_latent else 0)
        else:
            n_in = cond_dim if conditional else latent_dim

        style_dim = latent_dim
        if adaptive:
            for i in range(mapping_layers):
                self._add_linear(f"mapping{i}", style_dim, latent_embed_dim, rng)
                style_dim = latent_embed_dim

        for i in range(hidden_layers):
            self._add_linear(f"hidden{i}", n_in, hidden_dim, rng)
            if adaptive:
                self._add_linear(f"style{i}", style_dim, 2 * hidden_dim, rng)
            elif conditioning == "adanorm":
                self._add_param(f"norm{i}.scale", np.ones(hidden_dim, dtype=get_default_dtype()))
                self._add_param(f"norm{i}.shift", np.zeros(hidden_dim, dtype=get_default_dtype()))
            n_in = hidden_dim
        self._add_linear("out", n_in, data_dim, rng, zero=True)

    def _check_inputs(self, x_t: Optional[Tensor], z: Optional[Tensor]) -> int:
        if z is not None and not self.use_latent:
            raise NetConfigError("latent provided to a generator built without latent variables")
        if z is None and self.use_latent:
            raise NetConfigError("generator expects a latent z")
        if self.conditional and x_t is None:
            raise NetConfigError("conditional generator expects x_t")
        if x_t is not None and x_t.shape[-1] != self.data_dim:
            raise ShapeError("generator_forward", x_t.shape, (self.data_dim,))
        if z is not None and z.shape[-1] != self.latent_dim:
            raise ShapeError("generator_forward", z.shape, (self.latent_dim,))
        if x_t is not None and z is not None and x_t.shape[0] != z.shape[0]:
            raise ShapeError("generator_forward", x_t.shape, z.shape)
        return (x_t if x_t is not None else z).shape[0]

    def __call__(self, x_t: Optional[Tensor], z: Optional[Tensor], t: Timestep = 0) -> Tensor:
        x_t = as_tensor(x_t) if x_t is not None else None
        z = as_tensor(z) if z is not None else None
        batch = self._check_inputs(x_t, z)
        like = x_t if x_t is not None else z

        inputs = []
        if self.conditional:
            inputs += [x_t, _embed_batch(t, self.time_embed_dim, batch, like)]
        if self.use_latent and (self.conditioning == "concat" or not self.conditional):
            inputs.append(z)
        h = concat(inputs) if len(inputs) > 1 else inputs[0]

        if self.conditioning == "concat":
            for i in range(self.hidden_layers):
                h = leaky_relu(self.linear(f"hidden{i}", h))
            return self.linear("out", h)

        w = z
        if self.use_latent:
            for i in range(self.mapping_layers):
                w = leaky_relu(self.linear(f"mapping{i}", w))
        H = self.hidden_dim
        for i in range(self.hidden_layers):
            h = self.linear(f"hidden{i}", h)
            if self.use_latent:
                style = self.linear(f"style{i}", w)
                scale, shift = slice_last(style, 0, H) + 1.0, slice_last(style, H, 2 * H)
            else:
                scale, shift = self._params[f"norm{i}.scale"], self._params[f"norm{i}.shift"]
            h = leaky_relu(group_norm(h, self.norm_groups, scale, shift))
        return self.linear("out", h)


class DiscriminatorNet(Module):
    """D(x_{t-1}, x_t, t) returning one logit per row; ``conditional=False`` gives D(x)."""

    def __init__(
        self,
        data_dim: int,
        rng: Rng,
        hidden_dim: int = 512,
        hidden_layers: int = 3,
        time_embed_dim: int = 32,
        minibatch_std: bool = False,
        conditional: bool = True,
    ):
        super().__init__()
        self.data_dim = data_dim
        self.hidden_layers = hidden_layers
        self.time_embed_dim = time_embed_dim
        self.minibatch_std = minibatch_std
        self.conditional = conditional
        n_in = 2 * data_dim + time_embed_dim if conditional else data_dim
        for i in range(hidden_layers):
            self._add_linear(f"hidden{i}", n_in, hidden_dim, rng)
            n_in = hidden_dim
        self._add_linear("out", n_in + (1 if minibatch_std else 0), 1, rng, zero=True)

    def __call__(self, x_prev: Tensor, x_t: Optional[Tensor] = None, t: Timestep = 0) -> Tensor:
        x_prev = as_tensor(x_prev)
        if x_prev.ndim != 2 or x_prev.shape[1] != self.data_dim:
            raise ShapeError("discriminator_forward", x_prev.shape, (self.data_dim,))
        if self.conditional:
            x_t = as_tensor(x_t)
            if x_t.shape != x_prev.shape:
                raise ShapeError("discriminator_forward", x_prev.shape, x_t.shape)
            h = concat([x_prev, x_t, _embed_batch(t, self.time_embed_dim, x_prev.shape[0], x_prev)])
        else:
            h = x_prev
        for i in range(self.hidden_layers):
            h = leaky_relu(self.linear(f"hidden{i}", h))
        if self.minibatch_std:
            h = minibatch_stddev(h)
        return self.linear("out", h).reshape(-1)


def build_networks(config: TrainConfig, data_dim: int, rng: Rng) -> Tuple[GeneratorNet, DiscriminatorNet]:
    conditional = config.mode == "ddgan"
    generator = GeneratorNet(
        data_dim,
        rng.child(0),
        latent_dim=config.latent_dim,
        hidden_dim=config.hidden_dim,
        hidden_layers=config.hidden_layers,
        time_embed_dim=config.time_embed_dim,
        conditioning=config.conditioning,
        parametrization=config.parametrization,
        use_latent=config.use_latent or not conditional,
        latent_embed_dim=config.latent_embed_dim,
        mapping_layers=config.mapping_layers,
        norm_groups=config.norm_groups,
        conditional=conditional,
    )
    discriminator = DiscriminatorNet(
        data_dim,
        rng.child(1),
        hidden_dim=config.hidden_dim,
        hidden_layers=config.hidden_layers,
        time_embed_dim=config.time_embed_dim,
        minibatch_std=config.minibatch_std,
        conditional=conditional,
    )
    logger.debug("built generator with %d tensors, discriminator with %d tensors",
                 len(generator.parameters()), len(discriminator.parameters()))
    return generator, discriminator


def denoise_step(
    G: GeneratorNet,
    sched: DiffusionSchedule,
    x_t: Tensor,
    t: Timestep,
    rng: Rng,
    z: Optional[Tensor] = None,
) -> Tensor:
    """One reverse step x_t -> x_{t-1} under the generator's parametrization.

    Draws z (when the generator uses latents and none is given) before the
    posterior noise, so a step at t > 1 consumes latent_dim + data_dim normals
    per row and a step at t = 1 only latent_dim.
    """
    check_timestep(sched, t, low=1)
    x_t = as_tensor(x_t)
    if z is None and G.use_latent:
        z = sample_normal(rng, (x_t.shape[0], G.latent_dim))
    out = G(x_t, z, t)
    if G.parametrization == "direct":
        return out
    x0_hat = out if G.parametrization == "x0" else x0_from_eps(sched, x_t, out, t)
    return posterior_sample(posterior_params(sched, t), x0_hat, x_t, rng)
