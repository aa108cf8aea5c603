"""Sequence-to-sequence variational load forecaster.

A gated recurrent encoder consumes lifted daily load vectors; latent heads
map the hidden state to a diagonal-Gaussian posterior; decoder heads map a
latent sample to the mean and log-variance of the next day's hourly loads.
Training minimizes reconstruction negative log-likelihood plus a weighted
KL penalty against a standard-normal prior.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError
from .moe import MetaLifter
from .numerics import Tensor, matmul, no_grad

LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Widths and switches for the backbone network."""

    input_width: int = 24
    lift_width: int = 32
    hidden_width: int = 32
    latent_width: int = 16
    context_steps: int = 7
    source_names: tuple = ("temp", "hour", "dow", "price")
    source_dim: int = 4
    gate_hidden: int = 16
    hyper_hidden: int = 16
    head_activation: str = "identity"  # "tanh" restores capped heads
    logvar_clip: float = 10.0

    def __post_init__(self):
        if self.head_activation not in ("identity", "tanh"):
            raise ContractError(
                f"head_activation must be 'identity' or 'tanh', "
                f"got {self.head_activation!r}"
            )

    @property
    def context_hours(self) -> int:
        return self.context_steps * self.input_width


@dataclass
class DistributionalForecast:
    """Per-hour Gaussian forecast parameters, flattened over the horizon."""

    mu: np.ndarray
    sigma2: np.ndarray
    horizon_steps: int
    fallback: bool = False
    group_id: str = ""

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)


class Forecaster:
    """Backbone model: lifter + recurrent encoder + latent and output heads."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d, dl = config.input_width, config.lift_width
        hid, lat = config.hidden_width, config.latent_width
        self.lifter = MetaLifter(config.source_names, config.source_dim, d, dl,
                                 rng, config.gate_hidden, config.hyper_hidden)

        def mat(rows, cols, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True)

        def vec(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.w_update, self.u_update, self.b_update = mat(hid, dl, dl), mat(hid, hid, hid), vec(hid)
        self.w_reset, self.u_reset, self.b_reset = mat(hid, dl, dl), mat(hid, hid, hid), vec(hid)
        self.w_cand, self.u_cand, self.b_cand = mat(hid, dl, dl), mat(hid, hid, hid), vec(hid)
        self.w_mu_z, self.b_mu_z = mat(lat, hid, hid), vec(lat)
        self.w_logvar_z, self.b_logvar_z = mat(lat, hid, hid), vec(lat)
        self.w_mu_x, self.b_mu_x = mat(d, lat, lat), vec(d)
        self.w_logvar_x, self.b_logvar_x = mat(d, lat, lat), vec(d)

    # -- parameter registry ----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = self.lifter.parameters()
        params.update({
            "encoder.w_update": self.w_update, "encoder.u_update": self.u_update,
            "encoder.b_update": self.b_update,
            "encoder.w_reset": self.w_reset, "encoder.u_reset": self.u_reset,
            "encoder.b_reset": self.b_reset,
            "encoder.w_cand": self.w_cand, "encoder.u_cand": self.u_cand,
            "encoder.b_cand": self.b_cand,
            "latent.w_mu": self.w_mu_z, "latent.b_mu": self.b_mu_z,
            "latent.w_logvar": self.w_logvar_z, "latent.b_logvar": self.b_logvar_z,
            "decoder.w_mu": self.w_mu_x, "decoder.b_mu": self.b_mu_x,
            "decoder.w_logvar": self.w_logvar_x, "decoder.b_logvar": self.b_logvar_x,
        })
        return params

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names bucketed by functional block (for gradient checks)."""
        groups: dict[str, list[str]] = {
            "gate": [], "hypernets": [], "theta0": [],
            "encoder": [], "latent_heads": [], "decoder_heads": [],
        }
        for name in self.parameters():
            if name.startswith("lifter.gate"):
                groups["gate"].append(name)
            elif name.startswith("lifter.hyper"):
                groups["hypernets"].append(name)
            elif name == "lifter.theta0":
                groups["theta0"].append(name)
            elif name.startswith("encoder."):
                groups["encoder"].append(name)
            elif name.startswith("latent."):
                groups["latent_heads"].append(name)
            else:
                groups["decoder_heads"].append(name)
        return groups

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self.parameters().items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != p.data.shape:
                raise ContractError(
                    f"state shape mismatch for {name}: {src.shape} vs {p.data.shape}"
                )
            p.data = src.copy()

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "Forecaster":
        model = cls(config, np.random.default_rng(0))
        model.load_state(state)
        return model

    def set_trainable(self, flag: bool):
        for p in self.parameters().values():
            p.requires_grad = flag

    # -- forward pieces ----------------------------------------------------

    def encode_step(self, x_lifted: Tensor, h: Tensor, overrides=None) -> Tensor:
        """One gated-recurrent update of the hidden state."""
        u_cand = overrides.get("encoder.u_cand", self.u_cand) if overrides else self.u_cand
        update = (matmul(self.w_update, x_lifted) + matmul(self.u_update, h)
                  + self.b_update).sigmoid()
        reset = (matmul(self.w_reset, x_lifted) + matmul(self.u_reset, h)
                 + self.b_reset).sigmoid()
        cand = (matmul(self.w_cand, x_lifted) + matmul(u_cand, reset * h)
                + self.b_cand).tanh()
        return (1.0 - update) * h + update * cand

    def latent_params(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior mean and clamped log-variance of the next latent."""
        mu = matmul(self.w_mu_z, h) + self.b_mu_z
        logvar = (matmul(self.w_logvar_z, h) + self.b_logvar_z).clamp(
            -self.config.logvar_clip, self.config.logvar_clip)
        return mu, logvar

    def _decode_params(self, z: Tensor, overrides=None) -> tuple[Tensor, Tensor]:
        w_mu = overrides.get("decoder.w_mu", self.w_mu_x) if overrides else self.w_mu_x
        w_lv = overrides.get("decoder.w_logvar", self.w_logvar_x) if overrides else self.w_logvar_x
        mu = matmul(w_mu, z) + self.b_mu_x
        logvar = matmul(w_lv, z) + self.b_logvar_x
        if self.config.head_activation == "tanh":
            mu, logvar = mu.tanh(), logvar.tanh()
        clip = self.config.logvar_clip
        return mu, logvar.clamp(-clip, clip)

    def decode(self, z: Tensor, overrides=None) -> tuple[Tensor, Tensor]:
        """Gaussian output-head parameters (mean, variance) for one step."""
        mu, logvar = self._decode_params(z, overrides)
        return mu, logvar.exp()

    def initial_state(self) -> Tensor:
        return Tensor(np.zeros(self.config.hidden_width))


def sample_latent(mu_z: Tensor, logvar_z: Tensor, noise) -> Tensor:
    """Reparameterized latent draw: mu + exp(logvar/2) * noise.

    Gradient flows to the posterior parameters only; the noise enters as a
    constant.
    """
    eps = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=np.float64))
    return mu_z + (logvar_z * 0.5).exp() * eps.detach()


def gaussian_nll(target: np.ndarray, mu: Tensor, logvar: Tensor) -> Tensor:
    """Negative log-density of ``target`` under diag-Gaussian (mu, e^logvar)."""
    diff = mu - Tensor(np.asarray(target, dtype=np.float64))
    return (0.5 * ((LN_2PI + logvar) + (diff * diff) * (-logvar).exp())).sum()


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, e^logvar) || N(0, I)) for diagonal Gaussians, closed form."""
    return (0.5 * ((mu * mu) + logvar.exp() - 1.0 - logvar)).sum()


def _as_rng(noise):
    if noise is None:
        return None
    if isinstance(noise, np.random.Generator):
        return noise
    return np.random.default_rng(noise)


def elbo_loss(model: Forecaster, window, kl_weight: float, noise,
              overrides=None) -> Tensor:
    """Window training loss: per-step reconstruction NLL plus weighted KL.

    Each context step predicts the following day (teacher forcing); the
    final step predicts the window's target day.  ``noise`` may be a seed,
    a generator, or None for a posterior-mean (noise-free) evaluation.
    """
    if kl_weight < 0:
        raise ContractError(f"kl_weight must be >= 0, got {kl_weight}")
    cfg = model.config
    ctx = np.asarray(window.context_loads, dtype=np.float64)
    ext = np.asarray(window.context_externals, dtype=np.float64)
    tgt = np.asarray(window.target_loads, dtype=np.float64)
    steps, d = cfg.context_steps, cfg.input_width
    if ctx.shape != (steps, d):
        raise InputError(
            f"window context must be {steps} steps of {d} hourly loads, got {ctx.shape}"
        )
    if tgt.size < d:
        raise InputError(f"window target must cover at least {d} hours, got {tgt.size}")
    rng = _as_rng(noise)

    h = model.initial_state()
    total = None
    for i in range(steps):
        theta = model.lifter.theta(ext[i])
        x_lifted = model.lifter.lift(Tensor(ctx[i]), theta)
        h = model.encode_step(x_lifted, h, overrides)
        mu_z, logvar_z = model.latent_params(h)
        if rng is None:
            z = mu_z
        else:
            z = sample_latent(mu_z, logvar_z, rng.standard_normal(cfg.latent_width))
        mu_x, logvar_x = model._decode_params(z, overrides)
        step_target = ctx[i + 1] if i + 1 < steps else tgt[:d]
        step_loss = gaussian_nll(step_target, mu_x, logvar_x) \
            + kl_weight * kl_standard_normal(mu_z, logvar_z)
        total = step_loss if total is None else total + step_loss
    return total


def forecast(model: Forecaster, context_loads, context_externals,
             horizon_steps: int, mode: str = "deterministic", noise=None,
             overrides=None, group_id: str = "") -> DistributionalForecast:
    """Roll out per-day Gaussian forecasts from a full context window.

    Deterministic mode decodes the posterior mean; sampled mode draws the
    latent with seeded noise.  Rollout feeds predicted means back as the
    next day's input and reuses the final context step's externals for
    future steps.
    """
    cfg = model.config
    ctx = np.asarray(context_loads, dtype=np.float64)
    ext = np.asarray(context_externals, dtype=np.float64)
    if ctx.shape != (cfg.context_steps, cfg.input_width):
        raise InputError(
            f"context must supply {cfg.context_steps} steps of {cfg.input_width} "
            f"hourly loads ({cfg.context_hours} hours), got shape {ctx.shape}"
        )
    if horizon_steps < 1:
        raise ContractError(f"horizon_steps must be >= 1, got {horizon_steps}")
    if mode not in ("deterministic", "sampled"):
        raise ContractError(f"unknown forecast mode {mode!r}")
    rng = _as_rng(noise)
    if mode == "sampled" and rng is None:
        raise ContractError("sampled mode requires a noise seed or generator")

    with no_grad():
        h = model.initial_state()
        for i in range(cfg.context_steps):
            theta = model.lifter.theta(ext[i])
            h = model.encode_step(model.lifter.lift(Tensor(ctx[i]), theta), h, overrides)
        last_ext = ext[-1]
        mus, variances = [], []
        for k in range(horizon_steps):
            mu_z, logvar_z = model.latent_params(h)
            if mode == "deterministic":
                z = mu_z
            else:
                z = sample_latent(mu_z, logvar_z, rng.standard_normal(cfg.latent_width))
            mu_x, var_x = model.decode(z, overrides)
            mus.append(mu_x.data.copy())
            variances.append(var_x.data.copy())
            if k + 1 < horizon_steps:
                theta = model.lifter.theta(last_ext)
                h = model.encode_step(model.lifter.lift(mu_x, theta), h, overrides)
    return DistributionalForecast(np.concatenate(mus), np.concatenate(variances),
                                  horizon_steps, group_id=group_id)
