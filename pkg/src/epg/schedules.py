"""Scalar schedules shared by pre-training, fine-tuning and sampling.

Time ``t`` is the EDM noise scale: ``x_t = x_0 + t * eps`` with ``t`` in
``[sigma_min, T]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionConfig:
    T: float = 80.0
    sigma_min: float = 0.002
    sigma_data: float = 0.5
    rho: float = 7.0
    shift_base: int = 64

    def __post_init__(self):
        if not 0 < self.sigma_min < self.T:
            raise ValueError(f"need 0 < sigma_min < T, got {self.sigma_min}, {self.T}")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.shift_base < 1:
            raise ValueError("shift_base must be >= 1")


@dataclass(frozen=True)
class TimeGrid:
    """Ascending discretization ``t_0 < ... < t_{N-1}`` of the time horizon."""

    times: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError("a time grid needs at least two points")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("time grid must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i):
        return self.times[i]

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.times, dtype=dtype)


@dataclass(frozen=True)
class DiscretizationSchedule:
    n0: int = 20
    n1: int = 1280
    total_steps: int = 600_000

    def __post_init__(self):
        if not 2 <= self.n0 <= self.n1:
            raise ValueError("need 2 <= n0 <= n1")
        ratio = self.n1 // self.n0
        if self.n1 % self.n0 or ratio & (ratio - 1):
            raise ValueError("n1 / n0 must be a power of two")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def levels(self) -> int:
        return int(math.log2(self.n1 // self.n0)) + 1


@dataclass(frozen=True)
class RatioSchedule:
    stages: int = 8
    total_steps: int = 600_000

    def __post_init__(self):
        if self.stages < 1 or self.total_steps < 1:
            raise ValueError("stages and total_steps must be positive")


@dataclass(frozen=True)
class TemperatureSchedule:
    tau1: float = 0.1
    tau2_init: float = 0.2
    total_steps: int = 600_000

    def __post_init__(self):
        if not 0 < self.tau1 <= self.tau2_init:
            raise ValueError("need 0 < tau1 <= tau2_init")


def karras_grid(n: int, cfg: DiffusionConfig = DiffusionConfig()) -> TimeGrid:
    """Rho-warped grid from ``sigma_min`` to ``T`` with exact endpoints."""
    if n < 2:
        raise ValueError(f"karras_grid needs n >= 2, got {n}")
    inv = 1.0 / cfg.rho
    lo, hi = cfg.sigma_min**inv, cfg.T**inv
    i = np.arange(n, dtype=np.float64)
    times = (lo + i / (n - 1) * (hi - lo)) ** cfg.rho
    times[0], times[-1] = cfg.sigma_min, cfg.T
    return TimeGrid(tuple(float(v) for v in times))


def icm_steps(k: int, sched: DiscretizationSchedule) -> int:
    """Number of grid points at training step ``k``; doubles in equal-length stages."""
    if not 0 <= k < sched.total_steps:
        raise ValueError(f"step {k} outside [0, {sched.total_steps})")
    level = k * sched.levels // sched.total_steps
    return min(sched.n0 * 2**level, sched.n1)


def nearest_index(grid: TimeGrid, sigma: torch.Tensor) -> torch.Tensor:
    """Index of the grid point closest to each ``sigma``, raised to at least 1.

    Ties resolve to the lower index; values outside the grid clamp to its ends.
    """
    times = grid.as_tensor()
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    dist = (sigma.reshape(-1, 1) - times.reshape(1, -1)).abs()
    # argmin returns the first minimum, which is the lower index on ties
    idx = dist.argmin(dim=1).reshape(sigma.shape)
    return idx.clamp_min(1)


def sample_sigma_discrete(
    grid: TimeGrid,
    generator: torch.Generator | None,
    batch: int = 1,
    mu: float = -1.2,
    s: float = 1.6,
    sigma: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw lognormal noise levels and snap them to the grid.

    Returns ``(n, t_n)``; ``sigma`` overrides the random draw.
    """
    if sigma is None:
        sigma = torch.exp(mu + s * torch.randn(batch, generator=generator, dtype=torch.float64))
    n = nearest_index(grid, sigma)
    return n, grid.as_tensor()[n]


def ratio_at(k: int, sched: RatioSchedule) -> float:
    if not 0 <= k < sched.total_steps:
        raise ValueError(f"step {k} outside [0, {sched.total_steps})")
    stage = k * sched.stages // sched.total_steps
    return 1.0 - 2.0 ** -(1 + stage)


def ect_pair_times(
    k: int,
    sched: RatioSchedule,
    cfg: DiffusionConfig,
    generator: torch.Generator | None,
    batch: int = 1,
    mu: float = -0.4,
    s: float = 1.6,
    t: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Continuous ``(t, r)`` pairs with ``r = ratio(k) * t``."""
    ratio = ratio_at(k, sched)
    if t is None:
        t = torch.exp(mu + s * torch.randn(batch, generator=generator, dtype=torch.float64))
    t = torch.as_tensor(t, dtype=torch.float64).clamp(cfg.sigma_min, cfg.T)
    r = torch.minimum((t * ratio).clamp_min(cfg.sigma_min), t)
    return t, r


def shift_factor(resolution: int, cfg: DiffusionConfig) -> float:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    return resolution / cfg.shift_base


def shift_sigma(t, resolution: int, cfg: DiffusionConfig = DiffusionConfig()):
    """Scale noise levels by ``resolution / shift_base``."""
    return t * shift_factor(resolution, cfg)


def temperature_at(u, p, sched: TemperatureSchedule):
    """Temperature for a point at normalized trajectory position ``u`` and training progress ``p``.

    The high-noise end starts at ``tau2_init`` and is annealed to ``tau1`` by a
    cosine in ``p``; ``u`` linearly interpolates between the two ends.
    """
    if torch.is_tensor(p):
        cos = torch.cos(math.pi * p)
    else:
        cos = math.cos(math.pi * p)
    tau2 = sched.tau1 + (sched.tau2_init - sched.tau1) * (1 + cos) / 2
    return sched.tau1 * (1 - u) + tau2 * u


def cskip_cout(t, cfg: DiffusionConfig = DiffusionConfig()):
    """Boundary coefficients with ``c_skip(0) = 1`` and ``c_out(0) = 0``."""
    sd2 = cfg.sigma_data**2
    if torch.is_tensor(t):
        denom = t * t + sd2
        return sd2 / denom, t * cfg.sigma_data / torch.sqrt(denom)
    denom = t * t + sd2
    return sd2 / denom, t * cfg.sigma_data / math.sqrt(denom)


def cin(t, cfg: DiffusionConfig = DiffusionConfig()):
    """Input scaling that keeps the network input at roughly unit variance."""
    if torch.is_tensor(t):
        return 1.0 / torch.sqrt(t * t + cfg.sigma_data**2)
    return 1.0 / math.sqrt(t * t + cfg.sigma_data**2)


def loss_weight(t_hi, t_lo):
    """``1 / (t_hi - t_lo)``; rejects non-positive gaps."""
    gap = t_hi - t_lo
    if torch.is_tensor(gap):
        if bool((gap <= 0).any()):
            raise ValueError("loss_weight needs t_hi > t_lo")
        return 1.0 / gap
    if gap <= 0:
        raise ValueError(f"loss_weight needs t_hi > t_lo, got {t_hi}, {t_lo}")
    return 1.0 / gap
