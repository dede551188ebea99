"""Diffusion math: noise schedule, forward process, training loss, DDIM step.

Conventions:
- timesteps are integers t in [0, T]; t=0 is clean data, t=T is the noisiest.
- schedule arrays are stored for t=1..T (index t-1); alpha_bar(0) == 1.
- schedule math is kept in float64, per-call coefficients are cast to the
  dtype of the tensors they scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise scales beta_t and their derived products.

    betas[i] is beta_{i+1}; alpha_bars[i] = prod_{s<=i+1} (1 - beta_s).
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        """beta_t for t in [1, T]."""
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        """alpha_bar_t for t in [0, T] (alpha_bar_0 := 1). Accepts int or
        integer tensor (per-sample timesteps)."""
        if isinstance(t, torch.Tensor):
            if torch.any(t < 0) or torch.any(t > self.T):
                raise ValueError(f"timestep out of range [0, {self.T}]")
            table = np.concatenate([[1.0], self.alpha_bars])
            return torch.from_numpy(table[t.cpu().numpy()])
        self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def _check_t(self, t: int, low: int) -> None:
        if not (low <= int(t) <= self.T):
            raise ValueError(f"timestep {t} out of range [{low}, {self.T}]")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.

    t may be an int in [1, T] or a per-sample integer tensor matching the
    batch dimension of z0.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor):
        if torch.any(t < 1) or torch.any(t > sched.T):
            raise ValueError(f"timestep out of range [1, {sched.T}]")
        ab = sched.alpha_bar(t).reshape([t.shape[0]] + [1] * (z0.ndim - 1)).to(z0.dtype)
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
    sched._check_t(t, low=1)
    ab = sched.alpha_bar(int(t))
    return float(np.sqrt(ab)) * z0 + float(np.sqrt(1.0 - ab)) * eps


def q_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single forward kernel: sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps."""
    if eps.shape != z_prev.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z shape {tuple(z_prev.shape)}")
    beta = sched.beta(int(t))
    return float(np.sqrt(1.0 - beta)) * z_prev + float(np.sqrt(beta)) * eps


def training_loss(
    denoiser, z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule, conditioning=None
) -> torch.Tensor:
    """Noise-prediction MSE: mean over all elements of |eps - eps_hat|^2.

    `denoiser` is called as denoiser(z_t, t, conditioning) and must return a
    tensor shaped like z0. Non-finite predictions raise instead of silently
    propagating.
    """
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = denoiser(z_t, t, conditioning)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"denoiser output shape {tuple(eps_hat.shape)} != eps {tuple(eps.shape)}")
    if not torch.isfinite(eps_hat).all():
        raise FloatingPointError("denoiser produced non-finite output")
    return torch.mean((eps - eps_hat) ** 2)


def ddim_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float,
    sched: NoiseSchedule,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from timestep t to t_prev (< t).

    Predicts z0 from the noise estimate and re-projects to t_prev; eta
    controls the stochastic variance (eta=0 is fully deterministic).
    """
    t, t_prev = int(t), int(t_prev)
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= {sched.T}, got t={t}, t_prev={t_prev}")
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if eps_pred.shape != z_t.shape:
        raise ValueError("eps_pred shape mismatch")

    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(ab_t)

    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = np.sqrt(ab_prev) * z0_hat + dir_coeff * eps_pred
    if sigma > 0.0:
        if noise is None:
            noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        out = out + float(sigma) * noise
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Monotone timestep ladder 0 = tau_0 < ... < tau_k = T for sampling."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = np.unique(np.round(np.linspace(0, T, min(steps, T) + 1)).astype(int))
    return [int(v) for v in grid]


def timestep_embedding(
    t: torch.Tensor, dim: int, max_period: float = 10000.0, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [len(t), dim]."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-np.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    return emb.to(dtype)
