"""Forward noising, reverse denoising, and the linear variance schedule.

The forward chain perturbs data with per-step Gaussian noise of variance
beta_t, which composes into the closed-form marginal

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,   abar_t = prod_{s<=t} (1 - beta_s).

The reverse chain inverts one step at a time using a noise prediction eps_hat:

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z.

Timesteps are 1-based: t runs over {1..T}, and abar_0 = 1 denotes clean data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class DiffusionConfig:
    """Schedule length, endpoints, and the reverse-step noise-scale mode."""

    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"

    def __post_init__(self) -> None:
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                "need 0 < beta_start <= beta_end < 1, got "
                f"beta_start={self.beta_start}, beta_end={self.beta_end}"
            )
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(
                f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}"
            )


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule with derived products; index i holds timestep t = i + 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigma_mode: str = "beta"

    @property
    def timesteps(self) -> int:
        return int(self.betas.shape[0])

    def _index(self, t) -> np.ndarray:
        idx = np.asarray(t, dtype=np.int64)
        if np.any(idx < 1) or np.any(idx > self.timesteps):
            raise IndexError(f"timestep out of range [1, {self.timesteps}]: {t}")
        return idx - 1

    def beta(self, t):
        return self.betas[self._index(t)]

    def alpha(self, t):
        return self.alphas[self._index(t)]

    def alpha_bar(self, t):
        """abar_t for t in [0, T]; abar_0 = 1 means clean data."""
        idx = np.asarray(t, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx > self.timesteps):
            raise IndexError(f"timestep out of range [0, {self.timesteps}]: {t}")
        return np.where(idx == 0, 1.0, self.alpha_bars[np.maximum(idx, 1) - 1])

    def sigma(self, t: int) -> float:
        """Reverse-step noise scale: sqrt(beta_t), or sqrt(beta_tilde_t)."""
        beta = float(self.betas[self._index(t)])
        if self.sigma_mode == "beta":
            return math.sqrt(beta)
        abar_prev = float(self.alpha_bar(t - 1))
        abar = float(self.alpha_bar(t))
        return math.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta)


def build_linear_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Equally spaced betas from beta_start to beta_end with derived products."""
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(
        betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigma_mode=cfg.sigma_mode
    )


def forward_sample(x0, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``x0``/``noise`` may be single points of shape (d,) or batches (B, d);
    ``t`` is a scalar or an array of per-row timesteps in [1, T].
    """
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    idx = np.asarray(t, dtype=np.int64)
    if np.any(idx < 1) or np.any(idx > sched.timesteps):
        raise IndexError(f"timestep out of range [1, {sched.timesteps}]: {t}")
    abar = np.asarray(sched.alpha_bar(idx), dtype=float)
    if x0.ndim > 1:
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, z) -> np.ndarray:
    """One reverse-chain step from x_t to x_{t-1}.

    The caller supplies z ~ N(0, I), and must pass z = 0 at t = 1 so the final
    step is deterministic.
    """
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (1 <= t <= sched.timesteps):
        raise IndexError(f"timestep out of range [1, {sched.timesteps}]: {t}")
    beta = float(sched.betas[t - 1])
    alpha = float(sched.alphas[t - 1])
    abar = float(sched.alpha_bars[t - 1])
    mu = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    return mu + sched.sigma(t) * z


def sample(
    model: Callable[[np.ndarray, int], np.ndarray],
    sched: NoiseSchedule,
    n: int,
    dim: int,
    seed: int,
) -> np.ndarray:
    """Draw n points by iterating reverse_step from x_T ~ N(0, I).

    ``model`` maps a (n, dim) batch and a timestep to predicted noise.  Output
    is deterministic for a fixed seed.
    """
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    if n == 0:
        return np.zeros((0, dim))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    for t in range(sched.timesteps, 0, -1):
        eps_hat = np.asarray(model(x, t), dtype=float)
        if eps_hat.shape != x.shape:
            raise ValueError(
                f"model returned shape {eps_hat.shape}, expected {x.shape}"
            )
        z = rng.standard_normal((n, dim)) if t > 1 else np.zeros((n, dim))
        x = reverse_step(x, t, eps_hat, sched, z)
    return x
