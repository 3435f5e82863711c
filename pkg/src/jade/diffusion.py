"""Cascaded denoising diffusion over the latent pair: an unconditional DDPM on
extrinsics E followed by a conditional DDPM on intrinsics H given E.

Both stages train with the plain noise-prediction objective, sample with fixed
variance sigma_t^2 = beta_t, and operate on standardized latents; callers pass
LatentStats so samples come back in raw latent coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics
from .errors import ConfigError, ContractError, ShapeError
from .latent import Extrinsics, Intrinsics, LatentPair, LatentStats
from .numerics import ParameterStore


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray       # (T,) float64; beta[i] belongs to timestep i+1
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray      # sqrt(beta), the fixed reverse-process stddev

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside [1, {self.steps}]")


def linear_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError("schedule needs at least one step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(steps, dtype=np.float64) / (steps - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    return NoiseSchedule(
        steps=steps,
        beta=beta,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        sigma=np.sqrt(beta),
    )


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample schedule constants broadcast against (B, J, D) tensors."""
    arr = torch.as_tensor(values, dtype=like.dtype)
    if isinstance(t, int):
        return arr[t - 1]
    idx = torch.as_tensor(t, dtype=torch.long) - 1
    return arr[idx].reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ShapeError("noise must match the signal shape")
    if isinstance(t, int):
        schedule.check_t(t)
    else:
        tt = torch.as_tensor(t)
        if tt.min().item() < 1 or tt.max().item() > schedule.steps:
            raise IndexError(f"timestep outside [1, {schedule.steps}]")
    abar = _gather(schedule.alpha_bar, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def p_sample_step(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor,
                  z: torch.Tensor | None, schedule: NoiseSchedule) -> torch.Tensor:
    """One ancestral reverse step; the final step (t=1) is forced noiseless."""
    schedule.check_t(t)
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_pred) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    return mean + schedule.sigma[t - 1] * z


def time_embed(t, width: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal timestep embedding: interleaved (sin, cos) pairs of
    t / 10000^(2k/width). Scalar t gives (width,), a batch gives (B, width).
    """
    if width % 2 != 0:
        raise ConfigError("time embedding width must be even")
    scalar = isinstance(t, int)
    tt = torch.as_tensor([t] if scalar else t, dtype=dtype)
    k = torch.arange(width // 2, dtype=dtype)
    freq = torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / width)
    angles = tt[:, None] * freq[None, :]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, width)
    return out[0] if scalar else out


@dataclass(frozen=True)
class DenoiserConfig:
    j: int
    d: int = 128           # transformer width
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    d_h: int = 0           # intrinsic code width; unused by the extrinsic stage

    def validate(self, need_d_h: bool = False) -> None:
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.d % 2 != 0:
            raise ConfigError("width must be even for the time embedding")
        if need_d_h and self.d_h < 1:
            raise ConfigError("intrinsic denoiser needs d_h >= 1")


class ExtrinsicDenoiser(nn.Module):
    """Set transformer predicting the noise on E_t, conditioned on t only."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.in_proj = nn.Linear(3, config.d)
        self.pos = nn.Parameter(torch.zeros(config.j, config.d))
        self.blocks = nn.ModuleList(
            numerics.EncoderBlock(config.d, config.heads, config.mlp_ratio)
            for _ in range(config.layers))
        self.norm = numerics.LayerNorm(config.d)
        self.head = nn.Linear(config.d, 3)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1:] != (self.config.j, 3):
            raise ShapeError(f"expected (B, {self.config.j}, 3), got {tuple(x.shape)}")
        emb = time_embed(t, self.config.d, dtype=x.dtype)
        if emb.ndim == 1:
            emb = emb.expand(x.shape[0], -1)
        z = self.in_proj(x) + self.pos + emb[:, None, :]
        for block in self.blocks:
            z = block(z)
        return self.head(self.norm(z))


class AdaLNBlock(nn.Module):
    """Transformer block whose normalizations are modulated by a condition
    vector; scale/shift/gate projections start at zero, so the block is the
    identity at initialization.
    """

    def __init__(self, d: int, heads: int, cond_width: int, mlp_ratio: float):
        super().__init__()
        self.attn = numerics.SelfAttention(d, heads)
        self.mlp = numerics.Mlp(d, mlp_ratio)
        self.modulation = nn.Sequential(nn.SiLU(), numerics.ZeroInitLinear(cond_width, 6 * d))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        s1, b1, g1, s2, b2, g2 = self.modulation(cond).chunk(6, dim=-1)
        x = x + g1 * self.attn(numerics.adaptive_modulate(x, s1, b1))
        return x + g2 * self.mlp(numerics.adaptive_modulate(x, s2, b2))


class IntrinsicDenoiser(nn.Module):
    """Adaptive-normalization transformer predicting the noise on H_t; every
    block is modulated by c_i = [gamma(t) ; phi(e_i)] per joint.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate(need_d_h=True)
        self.config = config
        d = config.d
        self.in_proj = nn.Linear(config.d_h, d)
        self.pos = nn.Parameter(torch.zeros(config.j, d))
        self.cond_proj = nn.Linear(3, d)  # phi
        self.blocks = nn.ModuleList(
            AdaLNBlock(d, config.heads, 2 * d, config.mlp_ratio)
            for _ in range(config.layers))
        self.final_mod = nn.Sequential(nn.SiLU(), numerics.ZeroInitLinear(2 * d, 2 * d))
        self.head = nn.Linear(d, config.d_h)

    def forward(self, h: torch.Tensor, t, e: torch.Tensor) -> torch.Tensor:
        c = self.config
        if h.ndim != 3 or h.shape[1:] != (c.j, c.d_h):
            raise ShapeError(f"expected (B, {c.j}, {c.d_h}), got {tuple(h.shape)}")
        if e.shape != (h.shape[0], c.j, 3):
            raise ShapeError(f"condition must be (B, {c.j}, 3), got {tuple(e.shape)}")
        emb = time_embed(t, c.d, dtype=h.dtype)
        if emb.ndim == 1:
            emb = emb.expand(h.shape[0], -1)
        cond = torch.cat([emb[:, None, :].expand(-1, c.j, -1), self.cond_proj(e)], dim=-1)
        z = self.in_proj(h) + self.pos
        for block in self.blocks:
            z = block(z, cond)
        scale, shift = self.final_mod(cond).chunk(2, dim=-1)
        return self.head(numerics.adaptive_modulate(z, scale, shift))


def build_extrinsic_denoiser(config: DenoiserConfig, seed: int,
                             dtype: torch.dtype = torch.float32) -> ExtrinsicDenoiser:
    model = ExtrinsicDenoiser(config).to(dtype)
    numerics.init_parameters(model, numerics.seeded_generator(seed))
    return model


def build_intrinsic_denoiser(config: DenoiserConfig, seed: int,
                             dtype: torch.dtype = torch.float32) -> IntrinsicDenoiser:
    model = IntrinsicDenoiser(config).to(dtype)
    numerics.init_parameters(model, numerics.seeded_generator(seed))
    return model


# -- losses ----------------------------------------------------------------

def ddpm_loss_extrinsic(e0: torch.Tensor, t, eps: torch.Tensor,
                        model: ExtrinsicDenoiser, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared noise-prediction error on standardized extrinsics."""
    x_t = q_sample(e0, t, eps, schedule)
    return (model(x_t, t) - eps).pow(2).mean()


def ddpm_loss_intrinsic(h0: torch.Tensor, e: torch.Tensor, t, eps: torch.Tensor,
                        model: IntrinsicDenoiser, schedule: NoiseSchedule) -> torch.Tensor:
    x_t = q_sample(h0, t, eps, schedule)
    return (model(x_t, t, e) - eps).pow(2).mean()


# -- sampling --------------------------------------------------------------

def _ancestral(shape, predict, schedule: NoiseSchedule,
               generator: torch.Generator | None) -> torch.Tensor:
    x = torch.randn(shape, generator=generator)
    for t in range(schedule.steps, 0, -1):
        eps_pred = predict(x, t)
        z = torch.randn(shape, generator=generator) if t > 1 else None
        x = p_sample_step(x, t, eps_pred, z, schedule)
    return x


def sample_extrinsics(model: ExtrinsicDenoiser, schedule: NoiseSchedule,
                      stats: LatentStats, generator: torch.Generator | None,
                      count: int) -> list[Extrinsics]:
    """Ancestral samples from the extrinsic stage, destandardized."""
    with torch.no_grad():
        x = _ancestral((count, model.config.j, 3), lambda x, t: model(x, t),
                       schedule, generator)
    raw = x.numpy() * stats.e_std + stats.e_mean
    return [Extrinsics(e=raw[i].astype(np.float32)) for i in range(count)]


def _standardize_e(e: np.ndarray, stats: LatentStats) -> torch.Tensor:
    return torch.from_numpy(((e - stats.e_mean) / stats.e_std).astype(np.float32))


def sample_intrinsics(model: IntrinsicDenoiser, e: Extrinsics, schedule: NoiseSchedule,
                      stats: LatentStats, generator: torch.Generator | None) -> Intrinsics:
    """Conditional ancestral sample of H given one extrinsic configuration."""
    h = sample_intrinsics_batch(model, e.e[None], schedule, stats, generator)
    return Intrinsics(h=h[0])


def sample_intrinsics_batch(model: IntrinsicDenoiser, e: np.ndarray, schedule: NoiseSchedule,
                            stats: LatentStats, generator: torch.Generator | None) -> np.ndarray:
    """Batched conditional sampling; e is (B, J, 3) raw, returns (B, J, D_h) raw."""
    cond = _standardize_e(np.asarray(e, dtype=np.float32), stats)
    with torch.no_grad():
        x = _ancestral((cond.shape[0], model.config.j, model.config.d_h),
                       lambda x, t: model(x, t, cond), schedule, generator)
    return (x.numpy() * stats.h_std + stats.h_mean).astype(np.float32)


def cascade_sample(ext_model: ExtrinsicDenoiser, int_model: IntrinsicDenoiser,
                   ae_model, ext_schedule: NoiseSchedule, int_schedule: NoiseSchedule,
                   stats: LatentStats, count: int,
                   ext_generator: torch.Generator | None,
                   int_generator: torch.Generator | None):
    """Full generative chain E -> H|E -> X. Separate generators keep the two
    stages independently seedable. Returns (points (count, N, 3), latent pairs).
    """
    ext = sample_extrinsics(ext_model, ext_schedule, stats, ext_generator, count)
    e = np.stack([x.e for x in ext])
    h = sample_intrinsics_batch(int_model, e, int_schedule, stats, int_generator)
    with torch.no_grad():
        points = ae_model.decode(torch.from_numpy(e), torch.from_numpy(h)).numpy()
    pairs = [LatentPair(e=e[i], h=h[i]) for i in range(count)]
    return points, pairs


# -- exponential moving average --------------------------------------------

@dataclass
class EmaState:
    shadow: ParameterStore
    ratio: float


def ema_init(params: ParameterStore, ratio: float = 0.9999) -> EmaState:
    return EmaState(shadow=numerics.clone_store(params), ratio=ratio)


def ema_update(ema: EmaState, params: ParameterStore) -> EmaState:
    if set(ema.shadow) != set(params):
        raise ContractError("EMA shadow and model disagree on parameter paths")
    with torch.no_grad():
        for name, p in params.items():
            ema.shadow[name].mul_(ema.ratio).add_((1.0 - ema.ratio) * p.detach())
    return ema
