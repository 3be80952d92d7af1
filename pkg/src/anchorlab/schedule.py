"""Discrete DDPM noise schedule and the forward noising map.

Timesteps are 1-indexed integers ``1..T``. ``alpha_bars[t - 1]`` holds the
cumulative signal fraction at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_MODES = ("constant-one", "sigma-squared")


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size != self.total_steps:
            raise ValueError("betas must be a 1-d array of length total_steps")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in the open interval (0, 1)")
        alpha_bars = np.asarray(self.alpha_bars, dtype=float)
        if alpha_bars.shape != betas.shape:
            raise ValueError("alpha_bars must match betas in shape")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def _index(self, t):
        if type(t) is int or isinstance(t, np.integer):
            if not 1 <= t <= self.total_steps:
                raise ValueError(f"timestep out of range 1..{self.total_steps}: {t!r}")
            return int(t) - 1
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            if not np.all(t_arr == np.floor(t_arr)):
                raise ValueError(f"timesteps must be integers, got {t!r}")
            t_arr = t_arr.astype(int)
        if np.any(t_arr < 1) or np.any(t_arr > self.total_steps):
            raise ValueError(f"timestep out of range 1..{self.total_steps}: {t!r}")
        return t_arr - 1

    def alpha_bar(self, t):
        """Cumulative product ᾱ_t; accepts a scalar or an integer array."""
        return self.alpha_bars[self._index(t)]

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bar(t))


def make_schedule(total_steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-β schedule with ᾱ as the running product of (1 - β)."""
    if int(total_steps) != total_steps or total_steps < 2:
        raise ValueError(f"total_steps must be an integer >= 2, got {total_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, int(total_steps))
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or betas.size < 2:
        raise ValueError("need at least two betas")
    if np.any(np.diff(betas) < 0):
        raise ValueError("betas must be non-decreasing")
    return NoiseSchedule(betas.size, betas, np.cumprod(1.0 - betas))


def _check_time(sched: NoiseSchedule, t):
    return sched.alpha_bar(t)


def add_noise(z, t, eps, sched: NoiseSchedule):
    """z_t = √ᾱ_t z + √(1-ᾱ_t) eps. Batched inputs take ``t`` of shape (n,)."""
    z = np.asarray(z, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if z.shape != eps.shape:
        raise ValueError(f"z and eps differ in shape: {z.shape} vs {eps.shape}")
    ab = np.asarray(_check_time(sched, t))
    if ab.ndim:
        ab = ab[..., None]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def eta(t, sched: NoiseSchedule):
    ab = _check_time(sched, t)
    return np.sqrt(ab) / np.sqrt(1.0 - ab)


def weight_w(t, sched: NoiseSchedule, mode: str = "constant-one"):
    ab = _check_time(sched, t)
    if mode == "constant-one":
        return np.ones_like(ab)[()] if np.ndim(ab) else 1.0
    if mode == "sigma-squared":
        return 1.0 - ab
    raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")
